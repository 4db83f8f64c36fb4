//! Generate the synthetic shapes benchmark, draw augmented views, and
//! round-trip it through the CIFAR binary record format.

use deacl::data::{augment_batch, encode_records, parse_cifar_records, AugmentKind, AugmentationPolicy, Split, SyntheticSpec};
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let train = SyntheticSpec::new(8, 4, 0).generate()?;
    println!("{} images of shape {:?}, {} classes", train.len(), train.image_shape(), train.classes());

    let streams = SeedStreams::new(0);
    let batch = train.unlabeled().batch(&[0, 1, 2, 3]);
    for kind in [AugmentKind::Weak, AugmentKind::Strong] {
        let view = augment_batch(&AugmentationPolicy::of(kind), &batch, &streams, 0, 0);
        println!("{kind:?} view moves pixels by up to {:.3}", view.max_abs_diff(&batch.images));
    }

    let bytes = encode_records(&train);
    let back = parse_cifar_records(&bytes, train.image_shape(), train.classes(), Split::Train)?;
    println!(
        "{} bytes of records, labels preserved: {}, max pixel error {:.4}",
        bytes.len(),
        back.all_labels() == train.all_labels(),
        back.all_images().max_abs_diff(&train.all_images())
    );
    Ok(())
}
