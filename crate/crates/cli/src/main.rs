fn main() {
    std::process::exit(taskseq_cli::dispatch(std::env::args_os()));
}
