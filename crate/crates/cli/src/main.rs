fn main() {
    println!("hifiseg: placeholder");
}
