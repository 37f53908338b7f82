#include "alignclip/cli.hpp"

int main(int argc, char** argv) { return alignclip::run(argc, argv); }
