//! Write per-sample representations of the test split as CSV
//! (`index,label,e0..`), ready for t-SNE or UMAP elsewhere.

use deacl::config::RunConfig;
use deacl::eval::export_embeddings;
use deacl::pretrain::train_stage1;
use deacl::seed::SeedStreams;

fn main() -> deacl::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("embeddings.csv"));
    let mut cfg = RunConfig::desk(0);
    cfg.stage1.epochs = 30;
    let (train, test) = cfg.data.load(cfg.seed)?;
    let enc = train_stage1(&train.unlabeled(), &cfg.model, &cfg.stage1, &SeedStreams::new(0).child("stage1"))?.model;
    let n = export_embeddings(&enc.encoder_only(), &test, &path)?;
    println!("{n} rows of dimension {} written to {}", enc.rep_dim(), path.display());
    Ok(())
}
