// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    env_logger::init();
    std::process::exit(structcorr::cli::run(std::env::args_os()));
}
