//! Storage needed for one image per candidate versus per quarter profile.
use swe_forge::envprofile::{estimate_storage, format_decimal_bytes, MB};

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let candidates = args.first().copied().unwrap_or(102_582);
    let per_image_mb = args.get(1).copied().unwrap_or(300);
    let bytes = estimate_storage(candidates, per_image_mb * MB);
    println!("{candidates} images x {per_image_mb} MB = {}", format_decimal_bytes(bytes));
}
