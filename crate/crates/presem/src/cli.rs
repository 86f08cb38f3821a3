//! Command-line surface. `run` returns the process exit code: 0 success,
//! 1 usage error, 2 data error, 3 numerical failure.

pub fn run(_argv: &[String]) -> i32 {
    eprintln!("not yet wired");
    1
}
