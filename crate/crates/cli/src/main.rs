fn main() {
    println!("svx");
}
