fn main() {
    std::process::exit(reward_calib::cli::run(std::env::args_os()));
}
