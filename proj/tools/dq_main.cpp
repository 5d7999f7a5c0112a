#include "dqkd/cli.hpp"

int main(int argc, char** argv) { return dqkd::run_cli(argc, argv); }
