#include "dualpath/cli.hpp"

int main(int argc, char** argv) { return dualpath::cli::main(argc, argv); }
