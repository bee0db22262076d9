use std::path::Path;

use anyhow::{bail, Context, Result};
use pixemb_core::data::{self, Dataset};

/// Seed of the built-in synthetic set; fixed so train and eval agree on it.
pub const SYNTHETIC_SEED: u64 = 1234;
pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_SIDE: usize = 32;

/// Train and held-out splits named by a `--data` argument:
/// `toy`, `synthetic[:N]`, a `cifar-10-batches-bin` directory (desk subset
/// unless `full`) or a `cifar-100-binary` directory.
pub fn load(spec: &str, full: bool) -> Result<(Dataset, Dataset)> {
    if spec == "toy" {
        let toy = data::toy_separable(0);
        return Ok((toy.clone(), toy));
    }
    if let Some(rest) = spec.strip_prefix("synthetic") {
        let n = match rest.strip_prefix(':') {
            Some(n) => n.parse::<usize>().with_context(|| format!("bad synthetic size in {spec:?}"))?,
            None if rest.is_empty() => 2000,
            None => bail!("unknown data source {spec:?}"),
        };
        if n < SYNTHETIC_CLASSES {
            bail!("synthetic set needs at least {SYNTHETIC_CLASSES} images");
        }
        let all = data::synthetic(n + n / 5, SYNTHETIC_CLASSES, SYNTHETIC_SIDE, SYNTHETIC_SIDE, SYNTHETIC_SEED)?;
        return Ok(all.split(n)?);
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        bail!("dataset not found: {spec:?} is neither a known source nor a directory");
    }
    if dir.join(data::CIFAR10_TEST_FILE).is_file() {
        return if full {
            Ok(data::load_cifar10_dir(dir)?)
        } else {
            Ok(data::cifar10_desk(dir)?)
        };
    }
    if dir.join("train.bin").is_file() {
        return Ok(data::load_cifar100_dir(dir)?);
    }
    bail!("dataset not found: {} holds no CIFAR binary batches", dir.display())
}
