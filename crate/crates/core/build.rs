fn main() {
    // Dense and banded LAPACK routines are provided by the system OpenBLAS.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
