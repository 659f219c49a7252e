#include "widthscale/cli_app.hpp"

int main(int argc, char** argv) {
    return widthscale::run_cli(argc, argv);
}
