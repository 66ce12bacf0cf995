#include "usrf/cli.hpp"

int main(int argc, char** argv) { return usrf::cli::run(argc, argv); }
