#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bibldr/data.hpp"
#include "bibldr/eval/metrics.hpp"
#include "bibldr/seqmodel.hpp"
#include "oracles.hpp"

using namespace bibldr;
using namespace bibldr::seqmodel;
using data::Cell;
using data::CellSplit;
using numcore::Shape;
using numcore::Tensor;

namespace {

data::Dataset toy3() {
    return data::make_dataset(Tensor::matrix({{1, 1, 0}, {1, 0, 1}, {0, 1, 1}}),
                              Tensor::matrix({{1, 0.5, 0.2}, {0.5, 1, 0.4}, {0.2, 0.4, 1}}),
                              Tensor::matrix({{1, 0.3, 0.6}, {0.3, 1, 0.7}, {0.6, 0.7, 1}}));
}

CellSplit all_but(const data::Dataset& d, std::vector<Cell> held) {
    std::vector<Cell> train;
    for (std::size_t i = 0; i < d.drugs(); ++i)
        for (std::size_t j = 0; j < d.diseases(); ++j)
            if (std::find(held.begin(), held.end(), Cell{i, j}) == held.end()) train.push_back({i, j});
    return CellSplit(d.drugs(), d.diseases(), train, held);
}

proto::PrototypeBank random_bank(const data::Dataset& d, std::size_t d0, std::uint64_t seed) {
    numcore::Rng rng(seed);
    return {numcore::uniform_tensor(Shape{d.drugs(), d0}, -1, 1, rng),
            numcore::uniform_tensor(Shape{d.diseases(), d0}, -1, 1, rng)};
}

Stage2Config tiny(std::size_t d0 = 4, std::size_t dw = 4, std::size_t heads = 2, std::size_t max_len = 2) {
    Stage2Config c;
    c.d0 = d0;
    c.embed_dim = dw;
    c.heads = heads;
    c.max_len = max_len;
    c.batch = 8;
    c.seed = 11;
    return c;
}

void zero_params(Stage2Model& m, const std::string& prefix) {
    for (std::size_t i = 0; i < m.params().size(); ++i)
        if (m.params()[i].name.rfind(prefix, 0) == 0) m.params()[i].value.fill(0.0);
}

Tensor& param(Stage2Model& m, const std::string& name) { return m.params().at(name).value; }

// Pushes batch-norm running statistics away from their initial values.
void warm_batch_norm(Stage2Model& model, const data::Dataset& d, const CellSplit& split) {
    auto samples = training_samples(d, split);
    numcore::Tape tape;
    model.forward(tape, samples, d, numcore::BatchNormMode::train);
}

}  // namespace

TEST(SimPad, Examples) {
    EXPECT_EQ(sim_pad(0.5, 4), Tensor::vector({0.5, 0.5, 0.5, 0.5}));
    EXPECT_EQ(sim_pad(0.0, 2), Tensor::vector({0, 0}));
    EXPECT_EQ(sim_pad(0.37, 3), Tensor::vector({0.37, 0.37, 0.37}));
    EXPECT_THROW(sim_pad(1.2, 3), RangeError);
    EXPECT_THROW(sim_pad(-0.1, 3), RangeError);
}

TEST(RatingScale, Examples) {
    const Tensor h = Tensor::vector({1, -2, 0.5});
    EXPECT_EQ(rating_scale(h, 0, 2.0), h);
    const Tensor up = rating_scale(h, 1, 2.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(up[i], h[i] * 7.38905609893065);
    EXPECT_EQ(rating_scale(h, 1, 0.0), h);
}

TEST(Fuse, ZeroWeightsGiveBiasAndIdentityBlockPassesPrototype) {
    const auto d = toy3();
    auto cfg = tiny(3, 3, 2);
    cfg.adapter_activation = numcore::Activation::none;
    Stage2Model m(cfg, random_bank(d, 3, 1), d);
    const std::vector<double> p{0.4, -0.7, 0.9}, s{0.2, 0.2, 0.2};
    param(m, "fuse.drug.weight").fill(0.0);
    param(m, "fuse.drug.bias") = Tensor::vector({1, 2, 3});
    EXPECT_EQ(fuse(m, Side::drug, p, s), Tensor::vector({1, 2, 3}));

    Tensor w(Shape{6, 3});
    for (std::size_t i = 0; i < 3; ++i) w(i, i) = 1.0;
    param(m, "fuse.disease.weight") = w;
    param(m, "fuse.disease.bias").fill(0.0);
    EXPECT_EQ(fuse(m, Side::disease, p, s), Tensor::vector(p));
    EXPECT_THROW(fuse(m, Side::drug, std::vector<double>{1, 2}, s), DimensionError);
}

TEST(BuildSequenceInput, EmptySequencesGiveZeroMatrix) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 2), d);
    data::BehaviorSample s;
    s.target = {0, 0};
    const auto packed = build_sequence_input(m, s, d);
    EXPECT_EQ(packed.x, Tensor(Shape{4, 8}));
    EXPECT_EQ(packed.valid, std::vector<bool>(4, false));
}

TEST(BuildSequenceInput, PaddingLayoutWithOneDrugSideElement) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 2), d);
    data::BehaviorSample s;
    s.target = {0, 0};
    s.drug_seq = {{1, 1}};
    const auto packed = build_sequence_input(m, s, d);
    EXPECT_EQ(packed.valid, (std::vector<bool>{true, false, false, false}));
    for (std::size_t r = 1; r < 4; ++r)
        for (double v : packed.x.row(r)) EXPECT_EQ(v, 0.0);
    bool nonzero = false;
    for (double v : packed.x.row(0)) nonzero = nonzero || v != 0.0;
    EXPECT_TRUE(nonzero);
}

TEST(BuildSequenceInput, MatchesHandComputedChainOnThreeByThree) {
    const auto d = toy3();
    auto cfg = tiny(2, 1, 3, 2);
    cfg.temperature = 2.0;
    const proto::PrototypeBank bank{Tensor::matrix({{0.1, 0.9}, {-0.4, 0.3}, {0.8, -0.2}}),
                                    Tensor::matrix({{0.5, 0.5}, {-0.6, 0.2}, {0.3, 0.7}})};
    Stage2Model m(cfg, bank, d);
    param(m, "fuse.drug.weight") = Tensor::matrix({{0.2, -0.5}, {0.7, 0.1}, {-0.3, 0.4}, {0.6, 0.9}});
    param(m, "fuse.drug.bias") = Tensor::vector({0.05, -0.1});
    param(m, "fuse.disease.weight") = Tensor::matrix({{-0.2, 0.3}, {0.5, 0.5}, {0.9, -0.7}, {0.1, 0.2}});
    param(m, "fuse.disease.bias") = Tensor::vector({0.0, 0.3});
    param(m, "embed.drug") = Tensor::matrix({{0.11}, {0.22}, {0.33}});
    param(m, "embed.disease") = Tensor::matrix({{-0.11}, {-0.22}, {-0.33}});

    const CellSplit split = all_but(d, {{0, 0}});
    const auto sample = data::build_sample(d, split, {0, 0});
    const auto packed = build_sequence_input(m, sample, d);

    // row = [relu([P, s, s] W + b), W_emb] * e^{T a}
    auto row = [](const Tensor& p, double s, const Tensor& w, const Tensor& b, double emb, int a) {
        const double in[4] = {p[0], p[1], s, s};
        std::vector<double> out;
        for (std::size_t c = 0; c < 2; ++c) {
            double z = b[c];
            for (std::size_t r = 0; r < 4; ++r) z += in[r] * w(r, c);
            out.push_back(std::max(z, 0.0) * std::exp(2.0 * a));
        }
        out.push_back(emb * std::exp(2.0 * a));
        return out;
    };
    auto proto_row = [](const Tensor& t, std::size_t i) { return Tensor::vector({t(i, 0), t(i, 1)}); };
    const auto& wu = param(m, "fuse.drug.weight");
    const auto& bu = param(m, "fuse.drug.bias");
    const auto& wv = param(m, "fuse.disease.weight");
    const auto& bv = param(m, "fuse.disease.bias");
    std::vector<std::vector<double>> want{
        row(proto_row(bank.disease, 1), 0.3, wu, bu, -0.22, 1),  // drug side: disease 1, A[0][1] = 1
        row(proto_row(bank.disease, 2), 0.6, wu, bu, -0.33, 0),  // disease 2, A[0][2] = 0
        row(proto_row(bank.drug, 1), 0.5, wv, bv, 0.22, 1),      // disease side: drug 1, A[1][0] = 1
        row(proto_row(bank.drug, 2), 0.2, wv, bv, 0.33, 0),      // drug 2, A[2][0] = 0
    };
    EXPECT_EQ(packed.valid, std::vector<bool>(4, true));
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(packed.x(r, c), want[r][c], 1e-14) << r << "," << c;
}

TEST(BuildSequenceInput, ZeroTemperatureIsLabelInvariant) {
    const auto d = toy3();
    auto cfg = tiny();
    cfg.temperature = 0.0;
    Stage2Model m(cfg, random_bank(d, 4, 3), d);
    data::BehaviorSample pos, neg;
    pos.target = neg.target = {0, 0};
    pos.drug_seq = {{2, 1}};
    neg.drug_seq = {{2, 0}};
    pos.disease_seq = {{1, 1}};
    neg.disease_seq = {{1, 0}};
    EXPECT_EQ(build_sequence_input(m, pos, d).x, build_sequence_input(m, neg, d).x);
    cfg.temperature = 2.0;
    Stage2Model hot(cfg, random_bank(d, 4, 3), d);
    EXPECT_NE(build_sequence_input(hot, pos, d).x, build_sequence_input(hot, neg, d).x);
}

TEST(Truncate, KeepsMostSimilarThenRestoresIndexOrder) {
    Tensor sv(Shape{5, 5}, 0.5);
    for (std::size_t i = 0; i < 5; ++i) sv(i, i) = 1.0;
    sv(0, 4) = sv(4, 0) = 0.9;
    sv(0, 1) = sv(1, 0) = 0.1;
    const auto d = data::make_dataset(Tensor::matrix(1, 5), Tensor::identity(1), sv);
    data::BehaviorSample s;
    s.target = {0, 0};
    s.drug_seq = {{1, 0}, {2, 0}, {3, 1}, {4, 0}};
    const auto t = truncate(s, d, 2);
    // 4 has the highest similarity; 2 and 3 tie at 0.5 and the lower index wins.
    ASSERT_EQ(t.drug_seq.size(), 2u);
    EXPECT_EQ(t.drug_seq[0].index, 2u);
    EXPECT_EQ(t.drug_seq[1].index, 4u);
}

TEST(Transformer, SingleValidRowAttendsToItself) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 4), d);
    zero_params(m, "ffn.");
    PackedSequence packed{Tensor(Shape{4, 8}), {false, false, true, false}};
    numcore::Rng rng(5);
    const Tensor row = numcore::uniform_tensor(Shape{8}, -1, 1, rng);
    for (std::size_t c = 0; c < 8; ++c) packed.x(2, c) = row[c];
    const auto out = transformer_forward(m, packed, numcore::BatchNormMode::inference);
    ASSERT_FALSE(out.cold_path);
    // Softmax over one key is 1: MH = x Wv Wo. BN at running stats (0, 1) divides by sqrt(1+eps) twice.
    const auto& wv = param(m, "attn.value");
    const auto& wo = param(m, "attn.output");
    std::vector<double> v(8, 0.0), mh(8, 0.0);
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t k = 0; k < 8; ++k) v[c] += row[k] * wv(k, c);
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t k = 0; k < 8; ++k) mh[c] += v[k] * wo(k, c);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.out(2, c), (row[c] + mh[c]) / (1.0 + 1e-5), 1e-12);
    for (std::size_t r : {0, 1, 3})
        for (double x : out.out.row(r)) EXPECT_EQ(x, 0.0);
}

TEST(Transformer, MaskedKeysReceiveNoAttentionAndRowsSumToOne) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 6), d);
    numcore::Rng rng(7);
    PackedSequence packed{numcore::uniform_tensor(Shape{4, 8}, -1, 1, rng), {true, false, true, false}};
    for (std::size_t c = 0; c < 8; ++c) packed.x(1, c) = packed.x(3, c) = 0.0;
    Tensor weights;
    transformer_forward(m, packed, numcore::BatchNormMode::inference, &weights);
    ASSERT_EQ(weights.rows(), 2u * 4u);  // heads x L_seq
    for (std::size_t r = 0; r < weights.rows(); ++r) {
        EXPECT_EQ(weights(r, 1), 0.0);
        EXPECT_EQ(weights(r, 3), 0.0);
        EXPECT_NEAR(weights(r, 0) + weights(r, 2), 1.0, 1e-12);
    }
}

TEST(Transformer, FullyMaskedSequenceTakesColdPath) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 6), d);
    const auto out = transformer_forward(m, {Tensor(Shape{4, 8}), std::vector<bool>(4, false)},
                                         numcore::BatchNormMode::inference);
    EXPECT_TRUE(out.cold_path);
    EXPECT_EQ(out.out, Tensor(Shape{4, 8}));
}

TEST(Attention, TwoRowHandComputation) {
    // d1 = 2, one head: Q = X Wq, K = X Wk, V = X Wv with hand-set weights.
    const Tensor x = Tensor::matrix({{1, 0}, {0.5, 2}});
    const Tensor wq = Tensor::matrix({{1, 0}, {0, 1}}), wk = Tensor::matrix({{0.5, 0}, {0, 1}}),
                 wv = Tensor::matrix({{2, 1}, {0, 1}});
    numcore::Tape tape;
    Var xv = tape.constant(x);
    const Tensor out = numcore::multihead_attention(numcore::matmul(xv, tape.constant(wq)),
                                                    numcore::matmul(xv, tape.constant(wk)),
                                                    numcore::matmul(xv, tape.constant(wv)), 1, 2, {true, true})
                           .value();
    // Q = [[1,0],[0.5,2]], K = [[0.5,0],[0.25,2]], V = [[2,1],[1,2.5]]
    // logits / sqrt(2): row0 = (0.5, 0.25), row1 = (0.25, 4.125)
    auto attend = [](double a, double b) {
        const double ea = std::exp(a / std::sqrt(2.0)), eb = std::exp(b / std::sqrt(2.0));
        return std::make_pair(ea / (ea + eb), eb / (ea + eb));
    };
    const auto [p00, p01] = attend(0.5, 0.25);
    const auto [p10, p11] = attend(0.25, 4.125);
    EXPECT_NEAR(out(0, 0), p00 * 2 + p01 * 1, 1e-9);
    EXPECT_NEAR(out(0, 1), p00 * 1 + p01 * 2.5, 1e-9);
    EXPECT_NEAR(out(1, 0), p10 * 2 + p11 * 1, 1e-9);
    EXPECT_NEAR(out(1, 1), p10 * 1 + p11 * 2.5, 1e-9);
}

TEST(Assemble, ExtentAndBlocks) {
    const auto d = toy3();
    auto cfg = tiny(4, 4, 2, 1);
    Stage2Model m(cfg, random_bank(d, 4, 8), d);
    zero_params(m, "align.");
    param(m, "align.drug.bias") = Tensor::vector({1, 2, 3, 4, 5, 6, 7, 8});
    param(m, "align.disease.bias") = Tensor::vector({8, 7, 6, 5, 4, 3, 2, 1});
    Tensor o(Shape{2, 8});
    for (std::size_t i = 0; i < 16; ++i) o[i] = 100.0 + static_cast<double>(i);
    const Tensor mvec = assemble(m, o, 1, 2, {true, true});
    ASSERT_EQ(mvec.numel(), 32u);
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(mvec[i], param(m, "align.drug.bias")[i]);
        EXPECT_EQ(mvec[24 + i], param(m, "align.disease.bias")[i]);
    }
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(mvec[8 + i], o[i]);  // row-major, drug side first
    EXPECT_THROW(assemble(m, Tensor(Shape{3, 8}), 0, 0, {true, true, true}), DimensionError);
}

TEST(PredictLogit, ZeroHeadAndBiasShift) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 9), d);
    const std::size_t in = m.config().head_input();
    numcore::Rng rng(3);
    const Tensor features = numcore::uniform_tensor(Shape{in}, -1, 1, rng);
    const double z0 = predict_logit(m, features);
    EXPECT_EQ(z0, predict_logit(m, features));
    param(m, "head.2.bias")[0] += 0.75;
    EXPECT_NEAR(predict_logit(m, features) - z0, 0.75, 1e-12);
    zero_params(m, "head.");
    EXPECT_EQ(predict_logit(m, features), 0.0);
    EXPECT_THROW(predict_logit(m, Tensor(Shape{in + 1})), DimensionError);
}

TEST(ForwardSample, ZeroHeadScoresOneHalf) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 10), d);
    zero_params(m, "head.");
    const auto split = all_but(d, {{1, 1}, {2, 0}});
    EXPECT_EQ(forward_sample(m, data::build_sample(d, split, {1, 1}), d), 0.5);
    EXPECT_EQ(forward_sample(m, data::build_sample(d, split, {2, 0}), d), 0.5);
}

TEST(ForwardSample, MeanPoolIsPermutationInvariantFlattenIsNot) {
    numcore::Rng rng(12);
    const auto d = oracle::random_dataset(4, 6, 0.5, rng);
    const auto split = all_but(d, {{0, 0}});
    auto sample = data::build_sample(d, split, {0, 0});
    ASSERT_GE(sample.drug_seq.size(), 3u);
    auto permuted = sample;
    std::reverse(permuted.drug_seq.begin(), permuted.drug_seq.end());

    auto cfg = tiny(4, 4, 2, 6);
    cfg.pooling = Pooling::mean;
    Stage2Model pooled(cfg, random_bank(d, 4, 13), d);
    EXPECT_NEAR(forward_sample(pooled, sample, d), forward_sample(pooled, permuted, d), 1e-14);

    cfg.pooling = Pooling::flatten;
    Stage2Model flat(cfg, random_bank(d, 4, 13), d);
    EXPECT_NE(forward_sample(flat, sample, d), forward_sample(flat, permuted, d));
}

TEST(ForwardSample, GoldenScoreOnToyDataset) {
    const auto d = toy3();
    Stage2Model m(tiny(), random_bank(d, 4, 2024), d);
    const auto split = all_but(d, {{0, 0}});
    const double score = forward_sample(m, data::build_sample(d, split, {0, 0}), d);
    EXPECT_EQ(score, 0x1.4c072238e1c95p-1) << std::hexfloat << score;
}

TEST(Properties, MaskedRowMutationNeverChangesOutput) {
    numcore::Rng rng(21);
    const auto d = oracle::random_dataset(6, 5, 0.4, rng);
    const auto split = oracle::random_split(d, 0.6, 0.4, rng);
    Stage2Model m(tiny(4, 4, 2, 3), random_bank(d, 4, 22), d);
    warm_batch_norm(m, d, split);
    for (const auto& c : split.test()) {
        const auto packed = build_sequence_input(m, data::build_sample(d, split, c), d);
        auto mutated = packed;
        for (std::size_t r = 0; r < mutated.valid.size(); ++r)
            if (!mutated.valid[r])
                for (auto& v : mutated.x.row(r)) v = std::uniform_real_distribution<double>(-50, 50)(rng);
        const auto a = transformer_forward(m, packed, numcore::BatchNormMode::inference);
        const auto b = transformer_forward(m, mutated, numcore::BatchNormMode::inference);
        EXPECT_EQ(a.out, b.out);
        EXPECT_EQ(score_packed(m, packed, c), score_packed(m, mutated, c));
    }
}

TEST(Properties, TargetLabelNeverLeaksIntoScore) {
    numcore::Rng rng(31);
    const auto d = oracle::random_dataset(6, 5, 0.4, rng);
    const auto split = oracle::random_split(d, 0.6, 0.4, rng);
    Stage2Model m(tiny(4, 4, 2, 3), random_bank(d, 4, 32), d);
    warm_batch_norm(m, d, split);
    for (const auto& c : split.test()) {
        auto flipped = d;
        flipped.association(c.drug, c.disease) = 1.0 - d.association(c.drug, c.disease);
        EXPECT_EQ(forward_sample(m, data::build_sample(d, split, c), d),
                  forward_sample(m, data::build_sample(flipped, split, c), flipped));
    }
}

TEST(Properties, ShapeChainViolationsFailAtConstruction) {
    const auto d = toy3();
    EXPECT_THROW(Stage2Model(tiny(4, 4, 3), random_bank(d, 4, 1), d), ConfigError);
    EXPECT_THROW(Stage2Model(tiny(4, 4, 2), random_bank(d, 6, 1), d), DimensionError);
    auto cfg = tiny();
    cfg.temperature = -1;
    EXPECT_THROW(Stage2Model(cfg, random_bank(d, 4, 1), d), ConfigError);
    cfg = tiny();
    cfg.max_len = 0;
    EXPECT_THROW(Stage2Model(cfg, random_bank(d, 4, 1), d), ConfigError);
    auto d100 = tiny(100, 64, 4);
    EXPECT_NO_THROW(d100.validate());
    d100.embed_dim = 63;
    EXPECT_THROW(d100.validate(), ConfigError);
}

TEST(Properties, FullForwardGradientMatchesFiniteDifferences) {
    numcore::Rng rng(41);
    const auto d = oracle::random_dataset(5, 4, 0.5, rng);
    const auto split = oracle::random_split(d, 0.7, 0.3, rng);
    Stage2Model m(tiny(4, 4, 2, 2), random_bank(d, 4, 42), d);
    std::vector<data::BehaviorSample> samples;
    Tensor labels(Shape{split.test().size()});
    for (const auto& c : split.test()) {
        labels[samples.size()] = d.label(c.drug, c.disease);
        samples.push_back(data::build_sample(d, split, c));
    }
    const auto r = oracle::check_parameters(m.params(), [&](numcore::Tape& tape) {
        return numcore::bce_with_logits(m.forward(tape, samples, d, numcore::BatchNormMode::train), labels);
    });
    EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST(ScoreCells, BatchMatchesSingleSampleAndIsStable) {
    numcore::Rng rng(51);
    const auto d = oracle::random_dataset(6, 6, 0.4, rng);
    const auto split = oracle::random_split(d, 0.6, 0.4, rng);
    auto cfg = tiny(4, 4, 2, 3);
    cfg.batch = 4;
    Stage2Model m(cfg, random_bank(d, 4, 52), d);
    warm_batch_norm(m, d, split);
    std::vector<Cell> cells(split.test().begin(), split.test().begin() + 10);
    const auto scored = score_cells(m, d, split, cells);
    ASSERT_EQ(scored.size(), 10u);
    for (const auto& sc : scored) {
        EXPECT_EQ(sc.score, forward_sample(m, data::build_sample(d, split, sc.cell), d));
        EXPECT_GT(sc.score, 0.0);
        EXPECT_LT(sc.score, 1.0);
    }
    const std::vector<Cell> twice{cells[0], cells[0]};
    const auto again = score_cells(m, d, split, twice);
    EXPECT_EQ(again[0].score, again[1].score);
    EXPECT_THROW(score_cells(m, d, split, std::vector<Cell>{split.train()[0]}), ContractError);
}

TEST(TrainStage2, LearnsBlockStructure) {
    const auto d = data::make_block_dataset(1);
    proto::Stage1Config s1;
    s1.d0 = 16;
    s1.hidden = {32};
    s1.epochs = 100;
    s1.pair_batch = 64;
    const auto bank = proto::make_bank(proto::train_encoders(d, s1), d);
    auto cfg = tiny(16, 8, 4, 8);
    cfg.lr = 1e-3;
    cfg.epochs = 40;
    cfg.batch = 16;
    const auto split = data::full_training_split(d, 1);
    auto r = train_stage2(d, split, bank, cfg);
    EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front());
    const auto samples = training_samples(d, split);
    const auto scores = score_samples(r.model, d, samples);
    eval::ScoredSet s;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        s.scores.push_back(scores[i]);
        s.labels.push_back(samples[i].label);
    }
    EXPECT_GT(eval::auroc(s), 0.95);

    auto again = train_stage2(d, split, bank, cfg);
    EXPECT_EQ(again.final_loss, r.final_loss);
}

TEST(TrainStage2, SplitWithoutPositivesIsRejected) {
    const auto d = toy3();
    const CellSplit split(3, 3, {{0, 2}, {2, 0}}, {});
    EXPECT_THROW(train_stage2(d, split, random_bank(d, 4, 1), tiny()), SplitError);
}

TEST(Stage2Checkpoint, RoundTripAndFingerprintCheck) {
    numcore::Rng rng(61);
    const auto d = oracle::random_dataset(5, 5, 0.4, rng);
    const auto split = oracle::random_split(d, 0.6, 0.4, rng);
    Stage2Model m(tiny(4, 4, 2, 3), random_bank(d, 4, 62), d);
    warm_batch_norm(m, d, split);
    const auto dir = std::filesystem::temp_directory_path() / "bibldr_stage2_ckpt";
    std::filesystem::remove_all(dir);
    m.save(dir);
    auto loaded = Stage2Model::load(dir, d);
    for (const auto& c : split.test()) {
        const auto s = data::build_sample(d, split, c);
        EXPECT_EQ(forward_sample(m, s, d), forward_sample(loaded, s, d));
    }
    auto other = d;
    other.association(0, 0) = 1.0 - other.association(0, 0);
    EXPECT_THROW(Stage2Model::load(dir, other), CheckpointError);
    std::filesystem::remove_all(dir);
}
