#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bibldr/numcore/ops.hpp"
#include "bibldr/numcore/random.hpp"

namespace bibldr::numcore {

/// Fully connected layer whose weights live in a ParameterStore (referenced by index,
/// so copies of the store stay consistent with copies of the layer).
struct Dense {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t in = 0;
    std::size_t out = 0;
    Activation act = Activation::none;

    static Dense create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                        Activation act, Rng& rng) {
        Dense d;
        d.in = in;
        d.out = out;
        d.act = act;
        d.weight = store.size();
        store.add(name + ".weight", fan_in_uniform(Shape{in, out}, in, rng));
        d.bias = store.size();
        store.add(name + ".bias", fan_in_uniform(Shape{out}, in, rng));
        return d;
    }

    Var operator()(Tape& tape, ParameterStore& store, Var x) const {
        return affine(x, tape.parameter(store[weight]), tape.parameter(store[bias]), act);
    }
};

/// A chain of Dense layers.
struct Mlp {
    std::vector<Dense> layers;

    /// widths = {in, h1, ..., out}; hidden layers use relu, the last uses final_act.
    static Mlp create(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& widths,
                      Activation final_act, Rng& rng) {
        if (widths.size() < 2) throw ContractError("mlp needs at least input and output widths");
        Mlp m;
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            const bool last = i + 2 == widths.size();
            m.layers.push_back(Dense::create(store, name + "." + std::to_string(i), widths[i], widths[i + 1],
                                             last ? final_act : Activation::relu, rng));
        }
        return m;
    }

    Var operator()(Tape& tape, ParameterStore& store, Var x) const {
        for (const auto& l : layers) x = l(tape, store, x);
        return x;
    }

    std::size_t in() const { return layers.front().in; }
    std::size_t out() const { return layers.back().out; }
};

}  // namespace bibldr::numcore
