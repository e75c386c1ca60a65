#include "ecqx/cli.hpp"

int main(int argc, char** argv) { return ecqx::cli_main(argc, argv); }
