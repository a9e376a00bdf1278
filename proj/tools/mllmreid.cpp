#include "mllmreid/experiment.hpp"

int main(int argc, char** argv) { return mllmreid::cli::run_command(argc, argv); }
