fn main() {
    std::process::exit(forecast_peft::cli::run());
}
