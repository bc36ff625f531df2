fn main() {
    println!("gcm");
}
