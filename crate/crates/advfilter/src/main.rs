fn main() {
    println!("advfilter");
}
