fn main() {
    // Filled in once the CLI module lands.
}
