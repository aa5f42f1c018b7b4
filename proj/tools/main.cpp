#include "semprobe/cli.hpp"

int main(int argc, char** argv) { return semprobe::run_cli(argc, argv); }
