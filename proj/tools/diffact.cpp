#include "diffact/commands.hpp"

int main(int argc, char** argv) { return diffact::run_cli(argc, argv); }
