use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::eval::EVAL_CHUNK;
use crate::nn::{LabeledSet, Mode, Network};

/// Post-pooling features of every sample, one row per sample in set order.
pub fn embeddings(ckpt: &Checkpoint, set: &LabeledSet) -> Result<(usize, Vec<f32>)> {
    if set.is_empty() {
        return Err(Error::Data("cannot embed an empty split".into()));
    }
    let net = Network::<f32>::from_checkpoint(ckpt)?;
    let width = ckpt.param("head.weight")?.dims()[1];
    let mut out = Vec::with_capacity(set.len() * width);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = set.batch::<f32>(chunk);
        let tape = net.forward(&batch.act(), Mode::Eval, None)?;
        out.extend_from_slice(&tape.features);
    }
    Ok((width, out))
}

/// CSV with columns `id, labels, f0 .. f{k-1}`; multiple labels are
/// separated by `;`.
pub fn export_embeddings(ckpt: &Checkpoint, set: &LabeledSet) -> Result<Vec<u8>> {
    let (width, feats) = embeddings(ckpt, set)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "labels".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (i, row) in feats.chunks(width).enumerate() {
        let labels = set.targets.labels_of(i).iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";");
        let mut rec = vec![set.ids[i].clone(), labels];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}
