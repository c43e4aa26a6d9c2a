#include "shortlvlm/cli.hpp"

int main(int argc, char** argv) { return shortlvlm::cli::run(argc, argv); }
