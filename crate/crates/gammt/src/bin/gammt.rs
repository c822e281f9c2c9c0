fn main() {
    // Die silently on a closed pipe, like other unix CLI tools.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(gammt::cli::main_from_args(std::env::args_os()));
}
