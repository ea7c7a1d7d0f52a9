fn main() {
    println!("latentmark");
}
