fn main() {
    std::process::exit(moe_replica_sim::cli::main_with_args(std::env::args_os()));
}
