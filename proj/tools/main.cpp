#include "gridvolt/cli.hpp"

int main(int argc, char** argv) { return gridvolt::cli::run(argc, argv); }
