#include "incseg/cli.hpp"

int main(int argc, char** argv) { return incseg::run_command(argc, argv); }
