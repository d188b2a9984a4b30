#include "i2v/cli.hpp"

int main(int argc, char** argv) { return i2v::cli::run_cli(argc, argv); }
