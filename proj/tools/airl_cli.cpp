#include "airl/cli.hpp"

int main(int argc, char** argv) { return airl::run_cli(argc, argv); }
