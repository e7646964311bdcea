#include "sigstyle/cli.hpp"

int main(int argc, char** argv) { return sigstyle::run(argc, argv); }
