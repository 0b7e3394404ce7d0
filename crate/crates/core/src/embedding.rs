//! Embedding extraction: global vectors by masked global max pooling, coarse
//! vectors from the shared decoder, and part-level fine vectors.
//!
//! Image fine embeddings come from horizontal bands of the foreground-attended
//! feature rows; text fine embeddings come from a dedicated set of text tokens
//! run through the same decoder. Slot `j` of the text tokens is trained to
//! align with image band `j`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::CrossAttentionRecord;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// One modality's retrieval representation: a global vector, D coarse
/// vectors and P fine vectors. Slot indices correspond across modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub modality: Modality,
    pub global: Vec<f64>,
    pub coarse: Vec<Vec<f64>>,
    pub fine: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine.len()
    }

    /// Total number of embedding vectors (1 + D + P).
    pub fn num_vectors(&self) -> usize {
        1 + self.coarse.len() + self.fine.len()
    }

    pub fn all_finite(&self) -> bool {
        self.global.iter().all(|v| v.is_finite())
            && self.coarse.iter().flatten().all(|v| v.is_finite())
            && self.fine.iter().flatten().all(|v| v.is_finite())
    }

    /// Flat layout used by the persisted record format: global, then coarse
    /// slots, then fine slots.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_vectors() * self.dim());
        out.extend_from_slice(&self.global);
        for c in &self.coarse {
            out.extend_from_slice(c);
        }
        for f in &self.fine {
            out.extend_from_slice(f);
        }
        out
    }

    pub fn from_flat(
        modality: Modality,
        d: usize,
        num_coarse: usize,
        num_fine: usize,
        flat: &[f64],
    ) -> Result<Self> {
        let expect = (1 + num_coarse + num_fine) * d;
        if flat.len() != expect {
            return Err(Error::ShapeMismatch {
                context: "embedding record".to_string(),
                expected: vec![expect],
                got: vec![flat.len()],
            });
        }
        let global = flat[..d].to_vec();
        let coarse = (0..num_coarse)
            .map(|i| flat[(1 + i) * d..(2 + i) * d].to_vec())
            .collect();
        let fine = (0..num_fine)
            .map(|j| flat[(1 + num_coarse + j) * d..(2 + num_coarse + j) * d].to_vec())
            .collect();
        Ok(EmbeddingSet {
            modality,
            global,
            coarse,
            fine,
        })
    }
}

/// Graph-side mirror of [`EmbeddingSet`]: one node per embedding vector on a
/// live tape, so losses can differentiate through all slots.
#[derive(Clone)]
pub struct EmbeddingVars {
    pub modality: Modality,
    pub global: Var,
    pub coarse: Vec<Var>,
    pub fine: Vec<Var>,
}

impl EmbeddingVars {
    /// Materialize current values into an [`EmbeddingSet`].
    pub fn values(&self, tape: &Tape) -> EmbeddingSet {
        EmbeddingSet {
            modality: self.modality,
            global: tape.value(self.global).data().to_vec(),
            coarse: self
                .coarse
                .iter()
                .map(|&v| tape.value(v).data().to_vec())
                .collect(),
            fine: self
                .fine
                .iter()
                .map(|&v| tape.value(v).data().to_vec())
                .collect(),
        }
    }
}

/// Head-and-token averaged cross-attention over image positions, used to
/// reweight features before the horizontal part split.
#[derive(Clone, Debug)]
pub struct ForegroundMap {
    /// One non-negative weight per flattened position; rows are stochastic,
    /// so entries average 1/r.
    pub weights: Vec<f64>,
}

impl ForegroundMap {
    /// Reshape to the (h, w) grid for visualization.
    pub fn to_grid(&self, grid_h: usize, grid_w: usize) -> Result<Vec<Vec<f64>>> {
        if grid_h * grid_w != self.weights.len() {
            return Err(Error::ShapeMismatch {
                context: "foreground map grid".to_string(),
                expected: vec![self.weights.len()],
                got: vec![grid_h * grid_w],
            });
        }
        Ok((0..grid_h)
            .map(|y| self.weights[y * grid_w..(y + 1) * grid_w].to_vec())
            .collect())
    }
}

/// Derive the foreground map from a decoder pass over image memory.
pub fn foreground_map(record: &CrossAttentionRecord) -> ForegroundMap {
    ForegroundMap {
        weights: record.mean_attention(),
    }
}

/// Masked global max pooling on a tape: (m, d) -> (d).
pub fn global_embed_graph(tape: &mut Tape, features: Var, mask: Option<&[bool]>) -> Result<Var> {
    tape.max_cols(features, mask)
}

/// Value-level masked global max pooling.
pub fn global_embed(features: &Tensor, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let v = global_embed_graph(&mut tape, x, mask)?;
    Ok(tape.value(v).data().to_vec())
}

/// Coarse embeddings: run the shared decoder's tokens over an encoded
/// memory. Row i of the result is slot i; the attention record feeds the
/// foreground map and visualizations.
pub fn coarse_embed(
    memory: &Tensor,
    mask: Option<&[bool]>,
    shared_tokens: &Tensor,
    decoder: &crate::attention::AttentionParameters,
) -> Result<(Vec<Vec<f64>>, CrossAttentionRecord)> {
    let record = decoder.decode(shared_tokens, memory, mask)?;
    let rows = (0..record.outputs.rows())
        .map(|i| record.outputs.row(i).to_vec())
        .collect();
    Ok((rows, record))
}

/// Text fine embeddings: the dedicated text tokens through the *same*
/// decoder. Slot j is trained to align with image band j.
pub fn fine_embed_text(
    memory: &Tensor,
    mask: Option<&[bool]>,
    text_tokens: &Tensor,
    decoder: &crate::attention::AttentionParameters,
) -> Result<Vec<Vec<f64>>> {
    let record = decoder.decode(text_tokens, memory, mask)?;
    Ok((0..record.outputs.rows())
        .map(|j| record.outputs.row(j).to_vec())
        .collect())
}

/// Foreground attention on a tape: averages the decoder's per-head attention
/// weights over heads and tokens, then reweights the memory residually:
/// `attended = memory + a_avg (x) memory`. Returns (attended, a_avg).
///
/// `peak_normalize` divides the map by its maximum first (off by default,
/// preserving the raw averaged weights).
pub fn foreground_attend_graph(
    tape: &mut Tape,
    memory: Var,
    attn_heads: &[Var],
    peak_normalize: bool,
) -> Result<(Var, Var)> {
    if attn_heads.is_empty() {
        return Err(Error::Config("foreground map needs attention heads".into()));
    }
    let seq = tape.value(memory).rows();
    for &h in attn_heads {
        if tape.value(h).cols() != seq {
            return Err(Error::ShapeMismatch {
                context: "foreground attention record".to_string(),
                expected: vec![seq],
                got: vec![tape.value(h).cols()],
            });
        }
    }
    let mut summed = attn_heads[0];
    for &h in &attn_heads[1..] {
        summed = tape.add(summed, h)?;
    }
    let per_pos = tape.mean_rows(summed);
    let mut a_avg = tape.scale(per_pos, 1.0 / attn_heads.len() as f64);
    if peak_normalize {
        let peak = tape.value(a_avg).data().iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            a_avg = tape.scale(a_avg, 1.0 / peak);
        }
    }
    let weighted = tape.scale_rows(memory, a_avg)?;
    let attended = tape.add(memory, weighted)?;
    Ok((attended, a_avg))
}

/// Value-level foreground attention from a materialized record.
pub fn foreground_attend(memory: &Tensor, record: &CrossAttentionRecord) -> Result<Tensor> {
    if record.seq_len() != memory.rows() {
        return Err(Error::ShapeMismatch {
            context: "foreground_attend".to_string(),
            expected: vec![memory.rows()],
            got: vec![record.seq_len()],
        });
    }
    let mut tape = Tape::new();
    let mem = tape.leaf(memory.clone());
    let heads: Vec<Var> = (0..record.n_heads())
        .map(|h| {
            let (q, s) = (record.num_queries(), record.seq_len());
            let data = record.weights.data()[h * q * s..(h + 1) * q * s].to_vec();
            tape.leaf(Tensor::new(vec![q, s], data))
        })
        .collect();
    let (attended, _) = foreground_attend_graph(&mut tape, mem, &heads, false)?;
    Ok(tape.value(attended).clone())
}

/// Split attended features into `p` contiguous row bands and max-pool each:
/// (r, d) -> p vectors of (d). Errors unless p divides r.
pub fn fine_embed_image_graph(tape: &mut Tape, attended: Var, p: usize) -> Result<Vec<Var>> {
    let r = tape.value(attended).rows();
    if p == 0 || !r.is_multiple_of(p) {
        return Err(Error::NotDivisible {
            value: r,
            divisor: p.max(1),
            context: "horizontal part split".to_string(),
        });
    }
    let band = r / p;
    (0..p)
        .map(|j| {
            let rows = tape.slice_rows(attended, j * band, band)?;
            tape.max_cols(rows, None)
        })
        .collect()
}

/// Value-level horizontal part split.
pub fn fine_embed_image(attended: &Tensor, p: usize) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = tape.leaf(attended.clone());
    let vars = fine_embed_image_graph(&mut tape, x, p)?;
    Ok(vars
        .into_iter()
        .map(|v| tape.value(v).data().to_vec())
        .collect())
}

// ---------------------------------------------------------------------------
// Persisted embedding records
// ---------------------------------------------------------------------------

/// One persisted embedding record: sample id, identity label, modality, and
/// the flattened embedding set in float32.
#[derive(Clone, Debug)]
pub struct EmbeddingRecord {
    pub id: u32,
    pub identity: u32,
    pub set: EmbeddingSet,
}

const EMBED_MAGIC: &[u8; 4] = b"PSEM";
const EMBED_VERSION: u32 = 1;

/// Write records with a (d, D, P, count) header. Values are stored float32.
pub fn write_embedding_file(
    path: &Path,
    d: usize,
    num_coarse: usize,
    num_fine: usize,
    records: &[EmbeddingRecord],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&EMBED_VERSION.to_le_bytes())?;
    for v in [d, num_coarse, num_fine, records.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for rec in records {
        if rec.set.dim() != d
            || rec.set.num_coarse() != num_coarse
            || rec.set.num_fine() != num_fine
        {
            return Err(Error::ShapeMismatch {
                context: "embedding record header".to_string(),
                expected: vec![d, num_coarse, num_fine],
                got: vec![rec.set.dim(), rec.set.num_coarse(), rec.set.num_fine()],
            });
        }
        w.write_all(&rec.id.to_le_bytes())?;
        w.write_all(&rec.identity.to_le_bytes())?;
        w.write_all(&[match rec.set.modality {
            Modality::Image => 0u8,
            Modality::Text => 1u8,
        }])?;
        for v in rec.set.to_flat() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct EmbeddingFileHeader {
    pub d: usize,
    pub num_coarse: usize,
    pub num_fine: usize,
    pub count: usize,
}

pub fn read_embedding_file(path: &Path) -> Result<(EmbeddingFileHeader, Vec<EmbeddingRecord>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(Error::Checkpoint("bad embedding file magic".to_string()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != EMBED_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported embedding file version {version}"
        )));
    }
    let d = read_u32(&mut r)? as usize;
    let num_coarse = read_u32(&mut r)? as usize;
    let num_fine = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let per = (1 + num_coarse + num_fine) * d;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = read_u32(&mut r)?;
        let identity = read_u32(&mut r)?;
        let mut mbyte = [0u8; 1];
        r.read_exact(&mut mbyte)?;
        let modality = match mbyte[0] {
            0 => Modality::Image,
            1 => Modality::Text,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown modality tag {other}"
                )))
            }
        };
        let mut flat = Vec::with_capacity(per);
        let mut f32buf = [0u8; 4];
        for _ in 0..per {
            r.read_exact(&mut f32buf)?;
            flat.push(f32::from_le_bytes(f32buf) as f64);
        }
        records.push(EmbeddingRecord {
            id,
            identity,
            set: EmbeddingSet::from_flat(modality, d, num_coarse, num_fine, &flat)?,
        });
    }
    Ok((
        EmbeddingFileHeader {
            d,
            num_coarse,
            num_fine,
            count,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionParameters;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn global_embed_single_position() {
        let f = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]);
        assert_eq!(global_embed(&f, None).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn global_embed_max_dominance() {
        let mut rng = seeded_rng(1);
        let mut f = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        f.set2(2, 3, 1000.0);
        let g = global_embed(&f, None).unwrap();
        assert_eq!(g[3], 1000.0);
    }

    #[test]
    fn global_embed_matches_scan_oracle() {
        let mut rng = seeded_rng(2);
        let f = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let g = global_embed(&f, None).unwrap();
        for c in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for r in 0..6 {
                best = best.max(f.at2(r, c));
            }
            assert_eq!(g[c], best);
        }
    }

    #[test]
    fn global_embed_respects_mask() {
        let f = Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0], vec![0.5, 3.0]]);
        let g = global_embed(&f, Some(&[false, true, true])).unwrap();
        assert_eq!(g, vec![1.0, 3.0]);
        assert!(global_embed(&f, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn foreground_zero_map_is_identity_and_ones_doubles() {
        let mut rng = seeded_rng(3);
        let mem = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        // Build records whose mean attention is exactly 0 / exactly 1.
        let zero_rec = CrossAttentionRecord {
            weights: Tensor::zeros(vec![2, 2, 4]),
            outputs: Tensor::zeros(vec![2, 3]),
        };
        let one_rec = CrossAttentionRecord {
            weights: Tensor::full(vec![2, 2, 4], 1.0),
            outputs: Tensor::zeros(vec![2, 3]),
        };
        let same = foreground_attend(&mem, &zero_rec).unwrap();
        assert_eq!(same, mem);
        let doubled = foreground_attend(&mem, &one_rec).unwrap();
        for i in 0..mem.len() {
            assert!((doubled.data()[i] - 2.0 * mem.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn foreground_matches_mean_then_hadamard_oracle() {
        let mut rng = seeded_rng(4);
        let mem = Tensor::randn(vec![8, 4], 1.0, &mut rng);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let tokens = Tensor::randn(vec![3, 4], 0.5, &mut rng);
        let rec = p.decode(&tokens, &mem, None).unwrap();
        let got = foreground_attend(&mem, &rec).unwrap();

        // straight-line oracle in plain loops
        let (n, q, s) = (rec.n_heads(), rec.num_queries(), rec.seq_len());
        for pos in 0..s {
            let mut avg = 0.0;
            for h in 0..n {
                for t in 0..q {
                    avg += rec.weight(h, t, pos);
                }
            }
            avg /= (n * q) as f64;
            for c in 0..4 {
                let expect = mem.at2(pos, c) + avg * mem.at2(pos, c);
                assert!((got.at2(pos, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarse_embed_trivial_and_shared_path_cases() {
        let mut rng = seeded_rng(21);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        // D = 1, seq = 1: the single memory row's value projection
        let tok = Tensor::randn(vec![1, 4], 0.1, &mut rng);
        let mem = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let (c, rec) = coarse_embed(&mem, None, &tok, &p).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(rec.weight(0, 0, 0), 1.0);
        assert_eq!(c[0].as_slice(), rec.outputs.row(0));

        // identical memory through both "paths" of a shared decoder
        let tok4 = Tensor::randn(vec![4, 4], 0.1, &mut rng);
        let mem6 = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let (a, ra) = coarse_embed(&mem6, None, &tok4, &p).unwrap();
        let (b, rb) = coarse_embed(&mem6, None, &tok4, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.weights, rb.weights);
    }

    #[test]
    fn fine_embed_text_rows_follow_token_order() {
        let mut rng = seeded_rng(22);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let mem = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let tokens = Tensor::randn(vec![4, 4], 0.2, &mut rng);
        let base = fine_embed_text(&mem, None, &tokens, &p).unwrap();
        assert_eq!(base.len(), 4);

        // permuting the tokens permutes the output rows identically
        let perm = [2usize, 0, 3, 1];
        let permuted_tokens =
            Tensor::from_rows(&perm.iter().map(|&i| tokens.row(i).to_vec()).collect::<Vec<_>>());
        let permuted = fine_embed_text(&mem, None, &permuted_tokens, &p).unwrap();
        for (out_row, &src) in perm.iter().enumerate() {
            assert_eq!(permuted[out_row], base[src]);
        }

        // definitional: rows equal the decoder outputs for the same tokens
        let rec = p.decode(&tokens, &mem, None).unwrap();
        for (j, row) in base.iter().enumerate() {
            assert_eq!(row.as_slice(), rec.outputs.row(j));
        }
    }

    #[test]
    fn peak_normalize_rescales_the_map_to_unit_max() {
        use crate::graph::Tape;
        let mut rng = seeded_rng(6);
        let mem = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let m = tape.leaf(mem.clone());
        // one head, one query: weights (0.1, 0.2, 0.3, 0.4)
        let head = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]));
        let (_, a_norm) = foreground_attend_graph(&mut tape, m, &[head], true).unwrap();
        let v = tape.value(a_norm).data();
        assert!((v[3] - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.25).abs() < 1e-12);
        // default path keeps the raw averaged weights
        let mut tape2 = Tape::new();
        let m2 = tape2.leaf(mem);
        let head2 = tape2.leaf(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]));
        let (_, a_raw) = foreground_attend_graph(&mut tape2, m2, &[head2], false).unwrap();
        assert!((tape2.value(a_raw).data()[3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn record_shape_mismatch_is_rejected() {
        let mem = Tensor::zeros(vec![5, 4]);
        let rec = CrossAttentionRecord {
            weights: Tensor::zeros(vec![2, 2, 4]),
            outputs: Tensor::zeros(vec![2, 4]),
        };
        assert!(foreground_attend(&mem, &rec).is_err());
    }

    #[test]
    fn fine_split_degenerate_cases() {
        let mut rng = seeded_rng(5);
        let x = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        // P = 1 equals the global pool
        let one = fine_embed_image(&x, 1).unwrap();
        assert_eq!(one[0], global_embed(&x, None).unwrap());
        // P = r returns the rows themselves
        let all = fine_embed_image(&x, 4).unwrap();
        for (j, band) in all.iter().enumerate() {
            assert_eq!(band.as_slice(), x.row(j));
        }
    }

    #[test]
    fn fine_split_spike_lands_in_its_band_only() {
        let mut x = Tensor::zeros(vec![4, 2]);
        x.set2(2, 0, 5.0); // row 2 => band 1 for P=2
        let bands = fine_embed_image(&x, 2).unwrap();
        assert_eq!(bands[1][0], 5.0);
        assert_eq!(bands[0][0], 0.0);
    }

    #[test]
    fn fine_split_divisibility_error() {
        let x = Tensor::zeros(vec![5, 2]);
        assert!(matches!(
            fine_embed_image(&x, 2),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn flattening_marker_convention() {
        // marker at grid (0, 0) lands in band 0; marker at (h-1, w-1) lands
        // in band P-1, for the row-major (h, w, d) layout.
        let (h, w, d, p) = (4, 2, 3, 4);
        let mut grid = Tensor::zeros(vec![h, w, d]);
        grid.data_mut()[0] = 9.0; // (0, 0, 0)
        grid.data_mut()[(h * w - 1) * d] = 7.0; // (h-1, w-1, 0)
        let flat = grid.reshape(vec![h * w, d]);
        let bands = fine_embed_image(&flat, p).unwrap();
        assert_eq!(bands[0][0], 9.0);
        assert_eq!(bands[p - 1][0], 7.0);
        for j in 1..p - 1 {
            assert_eq!(bands[j][0], 0.0);
        }
    }

    #[test]
    fn embedding_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.emb");
        let mk = |seed: u64, m: Modality| {
            let mut rng = seeded_rng(seed);
            EmbeddingSet {
                modality: m,
                global: Tensor::randn(vec![6], 1.0, &mut rng).into_data(),
                coarse: (0..2)
                    .map(|_| Tensor::randn(vec![6], 1.0, &mut rng).into_data())
                    .collect(),
                fine: (0..3)
                    .map(|_| Tensor::randn(vec![6], 1.0, &mut rng).into_data())
                    .collect(),
            }
        };
        let records = vec![
            EmbeddingRecord {
                id: 0,
                identity: 4,
                set: mk(1, Modality::Image),
            },
            EmbeddingRecord {
                id: 1,
                identity: 9,
                set: mk(2, Modality::Text),
            },
        ];
        write_embedding_file(&path, 6, 2, 3, &records).unwrap();
        let (hdr, got) = read_embedding_file(&path).unwrap();
        assert_eq!(hdr.count, 2);
        assert_eq!(hdr.d, 6);
        assert_eq!(got[1].identity, 9);
        assert_eq!(got[1].set.modality, Modality::Text);
        // f32 storage: equal within float32 rounding
        for (a, b) in records[0]
            .set
            .to_flat()
            .iter()
            .zip(got[0].set.to_flat().iter())
        {
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-6 + 1e-9);
        }
    }

    #[test]
    fn image_pipeline_matches_composed_oracle() {
        // Full image-side composition on a (2, 2, 8) toy map: flatten ->
        // +position -> encode -> {GMP global; decode coarse; foreground ->
        // band split}. All 9 vectors must match a straight-line oracle.
        use crate::attention::{decode_graph, encode_graph};
        use crate::graph::Tape;

        let (h, w, d, n_heads, n_tok, parts) = (2usize, 2usize, 8usize, 2usize, 4usize, 4usize);
        let r = h * w;
        let mut rng = seeded_rng(77);
        let fmap = Tensor::randn(vec![r, d], 1.0, &mut rng);
        let pos = Tensor::randn(vec![r, d], 0.1, &mut rng);
        let enc = AttentionParameters::init(d, n_heads, &mut rng).unwrap();
        let dec = AttentionParameters::init(d, n_heads, &mut rng).unwrap();
        let tokens = Tensor::randn(vec![n_tok, d], 0.3, &mut rng);

        // library path, composed on one tape
        let mut tape = Tape::new();
        let flat = tape.leaf(fmap.clone());
        let global = global_embed_graph(&mut tape, flat, None).unwrap();
        let posv = tape.leaf(pos.clone());
        let with_pos = tape.add(flat, posv).unwrap();
        let enc_vars = enc.as_vars(&mut tape);
        let memory = encode_graph(&mut tape, with_pos, None, &enc_vars, false).unwrap();
        let dec_vars = dec.as_vars(&mut tape);
        let tokv = tape.leaf(tokens.clone());
        let out = decode_graph(&mut tape, tokv, memory, None, &dec_vars).unwrap();
        let (attended, _) = foreground_attend_graph(&mut tape, memory, &out.attn, false).unwrap();
        let fine = fine_embed_image_graph(&mut tape, attended, parts).unwrap();

        // straight-line oracle in plain loops
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
        };
        let attn_oracle = |q_in: &[Vec<f64>], kv_in: &[Vec<f64>], p: &AttentionParameters| {
            let (nh, dh) = (p.n_heads(), p.head_dim());
            let (nq, s) = (q_in.len(), kv_in.len());
            let proj = |x: &[Vec<f64>], wt: &Tensor| -> Vec<Vec<f64>> {
                x.iter()
                    .map(|row| {
                        (0..wt.cols())
                            .map(|j| (0..d).map(|i| row[i] * wt.at2(i, j)).sum())
                            .collect()
                    })
                    .collect()
            };
            let mut head_outs = Vec::new();
            let mut attns = Vec::new();
            for hh in 0..nh {
                let q = proj(q_in, &p.w_q[hh]);
                let k = proj(kv_in, &p.w_k[hh]);
                let v = proj(kv_in, &p.w_v[hh]);
                let mut attn = vec![vec![0.0; s]; nq];
                for i in 0..nq {
                    let logits: Vec<f64> = (0..s)
                        .map(|j| {
                            (0..dh).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..s {
                        attn[i][j] = exps[j] / sum;
                    }
                }
                let out: Vec<Vec<f64>> = (0..nq)
                    .map(|i| {
                        (0..dh)
                            .map(|t| (0..s).map(|j| attn[i][j] * v[j][t]).sum())
                            .collect()
                    })
                    .collect();
                head_outs.push(out);
                attns.push(attn);
            }
            let result: Vec<Vec<f64>> = (0..nq)
                .map(|i| {
                    let mut cat = Vec::new();
                    for ho in &head_outs {
                        cat.extend_from_slice(&ho[i]);
                    }
                    (0..d)
                        .map(|j| (0..cat.len()).map(|t| cat[t] * p.w_o.at2(t, j)).sum())
                        .collect()
                })
                .collect();
            (result, attns)
        };

        // global: per-channel max over the raw map
        let frows = rows(&fmap);
        let global_oracle: Vec<f64> = (0..d)
            .map(|c| frows.iter().map(|row| row[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        // encoder: with_pos + mhsa(with_pos)
        let wp: Vec<Vec<f64>> = frows
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().zip(pos.row(i)).map(|(a, b)| a + b).collect())
            .collect();
        let (mh, _) = attn_oracle(&wp, &wp, &enc);
        let mem: Vec<Vec<f64>> = wp
            .iter()
            .zip(&mh)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let (coarse_oracle, cattn) = attn_oracle(&rows(&tokens), &mem, &dec);
        // foreground: mean attention over heads and tokens, residual Hadamard
        let mut avg = vec![0.0; r];
        for a in &cattn {
            for arow in a {
                for (pidx, v) in arow.iter().enumerate() {
                    avg[pidx] += v;
                }
            }
        }
        for v in &mut avg {
            *v /= (n_heads * n_tok) as f64;
        }
        let att: Vec<Vec<f64>> = mem
            .iter()
            .enumerate()
            .map(|(pidx, row)| row.iter().map(|v| v + avg[pidx] * v).collect())
            .collect();
        // fine: per-band max (bands of r/parts rows)
        let band = r / parts;
        let fine_oracle: Vec<Vec<f64>> = (0..parts)
            .map(|j| {
                (0..d)
                    .map(|c| {
                        (j * band..(j + 1) * band)
                            .map(|ridx| att[ridx][c])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect();

        // compare all 9 vectors
        let gval = tape.value(global).data();
        for c in 0..d {
            assert!((gval[c] - global_oracle[c]).abs() < 1e-10);
        }
        for i in 0..n_tok {
            let crow = tape.value(out.output).row(i).to_vec();
            for c in 0..d {
                assert!((crow[c] - coarse_oracle[i][c]).abs() < 1e-10);
            }
        }
        for (j, f) in fine.iter().enumerate() {
            let frow = tape.value(*f).data();
            for c in 0..d {
                assert!((frow[c] - fine_oracle[j][c]).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn gmp_is_monotone_in_inputs(
            base in prop::collection::vec(-5.0f64..5.0, 12),
            bump in prop::collection::vec(0.0f64..2.0, 12),
        ) {
            let x = Tensor::new(vec![4, 3], base.clone());
            let mut raised = base.clone();
            for (v, b) in raised.iter_mut().zip(&bump) {
                *v += b;
            }
            let y = Tensor::new(vec![4, 3], raised);
            let gx = global_embed(&x, None).unwrap();
            let gy = global_embed(&y, None).unwrap();
            for c in 0..3 {
                prop_assert!(gy[c] >= gx[c]);
            }
        }

        #[test]
        fn part_locality_spike_affects_one_band(
            row in 0usize..8,
            chan in 0usize..3,
        ) {
            let mut x = Tensor::zeros(vec![8, 3]);
            x.set2(row, chan, 10.0);
            let bands = fine_embed_image(&x, 4).unwrap();
            let hit = row / 2;
            for (j, band) in bands.iter().enumerate() {
                if j == hit {
                    prop_assert_eq!(band[chan], 10.0);
                } else {
                    prop_assert_eq!(band[chan], 0.0);
                }
            }
        }
    }
}
