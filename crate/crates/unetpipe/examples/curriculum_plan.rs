//! Emit the default patch-size curriculum and sample positive patches from
//! a synthetic labelled volume.
//!
//!     cargo run --example curriculum_plan

use unetpipe::curriculum::{
    default_plan, exact_expected_fraction, imbalance_ratio, sample_positive_patch,
};
use unetpipe::exec::Tensor;
use unetpipe::formats::emit_plan;

fn main() {
    let plan = default_plan((192, 192, 192));
    println!("{}", emit_plan(&plan));

    // A 4-cubed foreground blob inside a 32-cubed volume.
    let mut labels = Tensor::zeros(vec![32, 32, 32]);
    for x in 10..14 {
        for y in 12..16 {
            for z in 8..12 {
                labels.data[(x * 32 + y) * 32 + z] = 1.0;
            }
        }
    }

    println!("positive patches always hit the blob:");
    for seed in 0..4 {
        let s = sample_positive_patch(&labels, &labels, (8, 8, 8), seed).expect("patch fits");
        let fg = s.labels.data.iter().filter(|&&v| v > 0.0).count();
        println!("  seed {seed}: origin {:?}, {fg} foreground voxels", s.origin);
    }

    println!("\nexpected foreground fraction by patch size (positive-biased):");
    println!("{:>10} {:>12} {:>12}", "patch", "exact", "monte-carlo");
    for size in [4usize, 8, 16, 32] {
        let exact = exact_expected_fraction(&labels, (size, size, size)).expect("fits");
        let mc = imbalance_ratio(&labels, (size, size, size), 400, 7).expect("fits");
        println!("{size:>10} {exact:>12.5} {mc:>12.5}");
    }
    println!("smaller patches concentrate foreground; the whole image dilutes it.");
}
