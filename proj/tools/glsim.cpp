#include <glsim/cli.hpp>

int main(int argc, char** argv) { return glsim::cli::run(argc, argv); }
