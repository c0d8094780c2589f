fn main() {
    println!("lmpc");
}
