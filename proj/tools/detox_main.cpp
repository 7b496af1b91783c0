#include "detox/cli.hpp"

int main(int argc, char** argv) { return detox::run_cli(argc, argv); }
