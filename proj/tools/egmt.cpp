#include "egmt/cli.hpp"

int main(int argc, char** argv) { return egmt::cli::run(argc, argv); }
