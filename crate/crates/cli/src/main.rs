fn main() {
    println!("umdr");
}
