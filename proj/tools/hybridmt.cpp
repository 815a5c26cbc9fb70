#include "hybridmt/cli.hpp"

int main(int argc, char** argv) { return hybridmt::cli::run(argc, argv); }
