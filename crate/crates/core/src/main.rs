// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(seka::cli::dispatch(&args));
}
