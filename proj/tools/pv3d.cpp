#include "pv3d/cli.hpp"

int main(int argc, char** argv) { return pv3d::run_cli(argc, argv); }
