//! bfloat16 rounding and its effect on a convolution.

use podsim::nn::layers::Padding;
use podsim::precision::{conv2d_mixed, to_bf16, PrecisionPolicy};
use podsim::Tensor;

fn main() -> podsim::Result<()> {
    for x in [1.0f32, 0.1, 1.0 + 2f32.powi(-9), 1.0 + 3.0 * 2f32.powi(-9), 3.0e38, -0.0] {
        let y = to_bf16(x);
        println!("{x:>14e} -> {y:<14e} bits {:08x} -> {:08x}", x.to_bits(), y.to_bits());
    }

    let input = Tensor::<f32>::from_fn(&[1, 8, 8, 3], |i| ((i * 37 % 101) as f32 / 101.0) - 0.5);
    let kernel = Tensor::<f32>::from_fn(&[3, 3, 3, 4], |i| ((i * 53 % 89) as f32 / 89.0) - 0.5);
    let exact = conv2d_mixed(&input, &kernel, 1, Padding::Same, PrecisionPolicy::Fp32Only)?;
    let mixed = conv2d_mixed(&input, &kernel, 1, Padding::Same, PrecisionPolicy::MixedBf16Conv)?;
    let largest = exact.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let worst = exact
        .data()
        .iter()
        .zip(mixed.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    println!(
        "3x3x3 conv: max |mixed - fp32| {worst:.3e} against outputs up to {largest:.3} (bf16 relative step 2^-8 = {:.3e})",
        2f32.powi(-8)
    );
    Ok(())
}
