fn main() {
    let t0 = std::time::Instant::now();
    match presem::trainer::gradient_check(7) {
        Ok(r) => {
            print!("{r}");
            println!("elapsed {:?}", t0.elapsed());
            std::process::exit(if r.pass { 0 } else { 3 });
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(3);
        }
    }
}
