#include "hybridnorm/cli.hpp"

int main(int argc, char** argv) { return hybridnorm::run_cli(argc, argv); }
