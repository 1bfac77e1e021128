#include "bibldr/cli/commands.hpp"

int main(int argc, char** argv) { return bibldr::cli::main(argc, argv); }
