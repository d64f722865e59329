#include "mdts/cli.hpp"

int main(int argc, char** argv) { return mdts::cli::run(argc, argv); }
