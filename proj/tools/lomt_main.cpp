#include "lomt/pipeline.hpp"

int main(int argc, char** argv) { return lomt::run_cli(argc, argv); }
