#include "mmc/cli.hpp"

int main(int argc, char** argv) { return mmc::cli::run(argc, argv); }
