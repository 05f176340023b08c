//! Feature file layout (little-endian):
//!
//! ```text
//! "CPRF" | u32 version=1 | u32 n_samples | u32 v | u32 d0 | u32 c
//! | c NUL-terminated UTF-8 class names
//! | per sample: v*d0 f32 features, then c label bytes in {0,1}
//! ```

use std::path::Path;

use super::{LongTailDataset, Sample};
use crate::autodiff::Tensor;
use crate::binary::{dim_u32, read_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CPRF";
const VERSION: u32 = 1;

pub fn save_features(dataset: &LongTailDataset, path: &Path) -> Result<()> {
    let (v, d0) = dataset
        .feature_dims()
        .ok_or_else(|| Error::invalid("cannot save an empty dataset"))?;
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(dim_u32(dataset.len(), "n_samples")?);
    w.u32(dim_u32(v, "v")?);
    w.u32(dim_u32(d0, "d0")?);
    w.u32(dim_u32(dataset.num_classes(), "c")?);
    for name in &dataset.class_names {
        if name.as_bytes().contains(&0) {
            return Err(Error::invalid(format!("class name {name:?} contains NUL")));
        }
        w.cstr(name);
    }
    for s in &dataset.samples {
        for &x in s.features.data() {
            w.f32(x as f32);
        }
        w.bytes(&s.labels);
    }
    w.write_to(path)
}

pub fn load_features(path: &Path) -> Result<LongTailDataset> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, path, MAGIC, "CPRF", VERSION)?;
    let n = r.u32()? as usize;
    let v = r.u32()? as usize;
    let d0 = r.u32()? as usize;
    let c = r.u32()? as usize;
    if v == 0 || d0 == 0 || c == 0 {
        return Err(r.format(format!("zero dimension in header (v={v}, d0={d0}, c={c})")));
    }
    let names = (0..c).map(|_| r.cstr()).collect::<Result<Vec<_>>>()?;
    let per_sample = v
        .checked_mul(d0)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(c))
        .ok_or_else(|| r.format("header dimensions overflow"))?;
    match n.checked_mul(per_sample) {
        Some(total) if total <= r.remaining() => {}
        Some(_) => {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
            })
        }
        None => return Err(r.format("header dimensions overflow")),
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let data = (0..v * d0)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let labels = r.take(c)?.to_vec();
        let features = Tensor::matrix(v, d0, data)?;
        let sample = Sample::new(features, labels)
            .map_err(|e| r.format(format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    r.expect_end()?;
    LongTailDataset::new(samples, names)
}
