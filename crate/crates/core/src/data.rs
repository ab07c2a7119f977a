//! MNIST IDX ingestion and client partitioning.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, IdxErrorKind, Result};
use crate::model::Batch;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Labeled examples with pixel values scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    labels: Vec<u8>,
    input_dim: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<f64>, labels: Vec<u8>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 || pixels.len() != labels.len() * input_dim {
            return Err(Error::CountMismatch {
                images: if input_dim == 0 { 0 } else { pixels.len() / input_dim },
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::config("dataset", format!("label {l} outside [0, 9]")));
        }
        Ok(Dataset { pixels, labels, input_dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<Batch<'_>> {
        Batch::new(&self.pixels, &self.labels, self.input_dim)
    }

    /// Copy the given examples, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset { pixels, labels, input_dim: self.input_dim }
    }

    /// Gather examples into caller-owned buffers (reused across SGD steps).
    pub fn gather_into(&self, indices: &[usize], pixels: &mut Vec<f64>, labels: &mut Vec<u8>) {
        pixels.clear();
        labels.clear();
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
    }

    pub fn label_histogram(&self, indices: &[usize]) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &i in indices {
            h[self.labels[i] as usize] += 1;
        }
        h
    }

    /// Split off a seeded random validation subset of `fraction` of the rows.
    /// Returns `(validation, remainder)`; the remainder keeps file order.
    pub fn split_validation<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config("data.validation_fraction", "must lie in [0, 1)"));
        }
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let mut val_idx = order[..n_val].to_vec();
        let mut rest_idx = order[n_val..].to_vec();
        val_idx.sort_unstable();
        rest_idx.sort_unstable();
        Ok((self.subset(&val_idx), self.subset(&rest_idx)))
    }
}

/// Read a file, transparently inflating it when it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn err(&self, kind: IdxErrorKind) -> Error {
        Error::Idx { path: self.path.to_path_buf(), offset: self.offset, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(self.err(IdxErrorKind::Truncated { needed: n, available }));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            self.offset -= 4;
            return Err(self.err(IdxErrorKind::WrongMagic { expected, found }));
        }
        Ok(())
    }
}

/// Parse an IDX3 image file into `(count, rows*cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = IdxReader { path, bytes, offset: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let dims_at = r.offset;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        r.offset = dims_at;
        return Err(r.err(IdxErrorKind::BadDimensions));
    }
    let payload = r.take(count * rows * cols)?;
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, rows * cols, pixels))
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader { path, bytes, offset: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    let start = r.offset;
    let payload = r.take(count)?;
    if let Some(pos) = payload.iter().position(|&l| l as usize >= NUM_CLASSES) {
        r.offset = start + pos;
        return Err(r.err(IdxErrorKind::LabelOutOfRange(payload[pos])));
    }
    Ok(payload.to_vec())
}

/// Load a matching pair of IDX image and label files (plain or gzip).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_maybe_gzip(images_path)?;
    let label_bytes = read_maybe_gzip(labels_path)?;
    let (count, dim, pixels) = parse_idx_images(images_path, &image_bytes)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if labels.len() != count {
        return Err(Error::CountMismatch { images: count, labels: labels.len() });
    }
    Dataset::new(pixels, labels, dim)
}

/// Locate a dataset file, accepting a `.gz` sibling when the plain file is absent.
pub fn resolve_data_file(dir: &Path, name: &str) -> Option<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Some(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    gz.is_file().then_some(gz)
}

/// Disjoint example indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    shards: Vec<Vec<usize>>,
}

impl PartitionMap {
    pub fn new(shards: Vec<Vec<usize>>) -> Result<Self> {
        if shards.iter().any(Vec::is_empty) {
            return Err(Error::config("partition", "every client shard must be nonempty"));
        }
        Ok(PartitionMap { shards })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.shards[client]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }
}

fn check_clients(n_examples: usize, n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::config("clients.count", "need at least one client"));
    }
    if n_clients > n_examples {
        return Err(Error::config(
            "clients.count",
            format!("{n_clients} clients exceed {n_examples} training examples"),
        ));
    }
    Ok(())
}

/// Label-sorted shard split: sort by label, cut into `n_clients * shards_per_client`
/// equal contiguous shards (dropping the remainder), and deal shards to clients
/// through a seeded permutation.
pub fn partition_non_iid<R: Rng + ?Sized>(
    labels: &[u8],
    n_clients: usize,
    shards_per_client: usize,
    rng: &mut R,
) -> Result<PartitionMap> {
    check_clients(labels.len(), n_clients)?;
    if shards_per_client == 0 {
        return Err(Error::config("partition.shards_per_client", "must be >= 1"));
    }
    let n_shards = n_clients * shards_per_client;
    let shard_size = labels.len() / n_shards;
    if shard_size == 0 {
        return Err(Error::config(
            "partition.shards_per_client",
            format!("{n_shards} shards exceed {} examples", labels.len()),
        ));
    }
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| (labels[i], i));
    sorted.truncate(n_shards * shard_size);

    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    shard_ids.shuffle(rng);
    let shards = shard_ids
        .chunks_exact(shards_per_client)
        .map(|ids| {
            ids.iter().flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied()).collect()
        })
        .collect();
    PartitionMap::new(shards)
}

/// Seeded shuffle cut into `n_clients` contiguous pieces whose sizes differ by at most one.
pub fn partition_iid<R: Rng + ?Sized>(n_examples: usize, n_clients: usize, rng: &mut R) -> Result<PartitionMap> {
    check_clients(n_examples, n_clients)?;
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(rng);
    let base = n_examples / n_clients;
    let extra = n_examples % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let len = base + usize::from(c < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    PartitionMap::new(shards)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = IMAGES_MAGIC.to_be_bytes().to_vec();
        for x in [count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn two_image_fixture_parses_exactly() {
        let mut payload = vec![0u8; 4];
        payload.extend_from_slice(&[255, 255, 255, 255]);
        let bytes = idx_images(2, 2, 2, &payload);
        let (count, dim, pixels) = parse_idx_images(Path::new("fixture"), &bytes).unwrap();
        assert_eq!((count, dim), (2, 4));
        assert_eq!(pixels, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn image_magic_in_label_file_is_rejected() {
        let bytes = idx_images(1, 1, 1, &[0]);
        let err = parse_idx_labels(Path::new("labels.idx"), &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wrong magic"), "{msg}");
        assert!(msg.contains("labels.idx"), "{msg}");
        assert!(matches!(err, Error::Idx { offset: 0, .. }));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = idx_images(2, 2, 2, &[1, 2, 3]);
        let err = parse_idx_images(Path::new("img"), &bytes).unwrap_err();
        match err {
            Error::Idx { offset, kind: IdxErrorKind::Truncated { needed: 8, available: 3 }, .. } => {
                assert_eq!(offset, 16)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(2, 1, 1, &[0, 255])).unwrap();
        std::fs::write(&lab, idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::CountMismatch { images: 2, labels: 3 })));
    }

    #[test]
    fn gzip_files_are_detected() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lab = dir.path().join("lab");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_images(1, 1, 2, &[0, 255])).unwrap();
        std::fs::write(&img, enc.finish().unwrap()).unwrap();
        std::fs::write(&lab, idx_labels(&[7])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.pixels(), &[0.0, 1.0]);
        assert_eq!(ds.labels(), &[7]);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let err = parse_idx_labels(Path::new("l"), &idx_labels(&[1, 12])).unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 9, kind: IdxErrorKind::LabelOutOfRange(12), .. }));
    }

    fn balanced_labels(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 10) as u8).collect()
    }

    fn assert_disjoint(map: &PartitionMap) {
        let mut seen = HashSet::new();
        for shard in map.shards() {
            for &i in shard {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
    }

    #[test]
    fn non_iid_single_client_takes_everything() {
        let labels = balanced_labels(103);
        let map = partition_non_iid(&labels, 1, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(map.num_clients(), 1);
        assert_eq!(map.total(), 102);
    }

    #[test]
    fn non_iid_clients_see_few_labels() {
        let labels = balanced_labels(6000);
        let map = partition_non_iid(&labels, 10, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_disjoint(&map);
        assert_eq!(map.total(), 6000);
        for shard in map.shards() {
            let distinct: HashSet<u8> = shard.iter().map(|&i| labels[i]).collect();
            assert!(distinct.len() <= 4);
        }
    }

    #[test]
    fn partitions_are_seeded() {
        let labels = balanced_labels(500);
        let a = partition_non_iid(&labels, 5, 2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = partition_non_iid(&labels, 5, 2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        let c = partition_iid(500, 7, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let d = partition_iid(500, 7, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn iid_sizes_differ_by_at_most_one() {
        let map = partition_iid(103, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_disjoint(&map);
        assert_eq!(map.total(), 103);
        let sizes: Vec<usize> = map.shards().iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let single = partition_iid(50, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(single.total(), 50);
    }

    #[test]
    fn too_many_clients_is_config_error() {
        let labels = balanced_labels(5);
        assert!(partition_iid(5, 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().is_config());
        assert!(partition_non_iid(&labels, 6, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().is_config());
        assert!(partition_non_iid(&labels, 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().is_config());
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let pixels: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let ds = Dataset::new(pixels, balanced_labels(20), 1).unwrap();
        let (v, r) = ds.split_validation(0.25, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!((v.len(), r.len()), (5, 15));
        let mut all: Vec<f64> = v.pixels().iter().chain(r.pixels()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, ds.pixels());
    }

    proptest::proptest! {
        #[test]
        fn non_iid_disjoint_and_covering(n in 1usize..400, clients in 1usize..12, spc in 1usize..4, seed: u64) {
            let labels: Vec<u8> = (0..n).map(|i| ((i * 7) % 10) as u8).collect();
            match partition_non_iid(&labels, clients, spc, &mut ChaCha8Rng::seed_from_u64(seed)) {
                Ok(map) => {
                    assert_disjoint(&map);
                    let grid = clients * spc;
                    proptest::prop_assert!(map.total() >= n - n % grid);
                    proptest::prop_assert!(map.shards().iter().flatten().all(|&i| i < n));
                }
                Err(e) => proptest::prop_assert!(e.is_config() && clients * spc > n),
            }
        }
    }
}
