fn main() { println!("gkpsim"); }
