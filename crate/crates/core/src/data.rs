//! Binary PPM codec, directory-labelled datasets and the synthetic blob set.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{bilinear_resize, Tensor};

/// Decode a binary (P6) PPM with maxval 255 into `[H, W, 3]` values in
/// `0..=255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, raw) = parse_ppm(bytes)?;
    Tensor::new([h, w, 3], raw.iter().map(|&b| b as f32).collect())
}

/// Header fields and pixel bytes of a P6 image.
fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::PpmHeader("missing P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::PpmHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][k];
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::PpmHeader(format!("bad {name} field")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::PpmHeader("no whitespace after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::PpmMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::PpmHeader(format!("empty image {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncated {
            expected,
            found: payload.len(),
        });
    }
    Ok((w, h, &payload[..expected]))
}

/// Encode `[H, W, 3]` as P6; values are clamped to `0..=255` and rounded
/// half up.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *t.dims() else {
        return Err(Error::InvalidArgument(format!(
            "ppm encoding needs [H, W, 3], got {}",
            t.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub(crate) fn to_byte(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 255.0) + 0.5).floor() as u8
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(t)?).map_err(|e| Error::io(path, e))
}

/// Pixel-space rectangle `[x0, x1) x [y0, y1)`.
pub type Rect = [usize; 4];

/// Labelled images in canonical order.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, pdim, pdim, 3]`, values in `0..=255`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    /// Relative path or synthetic id per item.
    pub ids: Vec<String>,
    pub class_names: [String; 2],
    /// Hex SHA-256 over ids, labels and decoded pixels.
    pub digest: String,
    /// Blob bounding box per synthetic item.
    pub regions: Vec<Option<Rect>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pdim(&self) -> usize {
        self.images.dims()[1]
    }

    pub fn balanced(&self) -> bool {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        2 * ones == self.len()
    }

    pub fn image(&self, index: usize) -> Result<Tensor> {
        let t = self.images.slice_outer(index, 1)?;
        let d = t.dims()[1..].to_vec();
        t.reshape(d)
    }

    /// Images and `[B, 1]` labels for `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let dims = self.images.dims();
        let size: usize = dims[1..].iter().product();
        let mut x = Vec::with_capacity(indices.len() * size);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("item {i} out of range")));
            }
            x.extend_from_slice(&self.images.data()[i * size..(i + 1) * size]);
            y.push(self.labels[i] as f32);
        }
        let mut xd = dims.to_vec();
        xd[0] = indices.len();
        Ok((Tensor::new(xd, x)?, Tensor::new([indices.len(), 1], y)?))
    }
}

struct Item {
    id: String,
    label: u8,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

fn digest_items(items: &[Item]) -> String {
    let mut h = Sha256::new();
    h.update((items.len() as u64).to_le_bytes());
    for it in items {
        h.update((it.id.len() as u64).to_le_bytes());
        h.update(it.id.as_bytes());
        h.update([it.label]);
        h.update((it.width as u64).to_le_bytes());
        h.update((it.height as u64).to_le_bytes());
        h.update(&it.pixels);
    }
    hex::encode(h.finalize())
}

/// Load `<root>/<class>/*` with exactly two class directories; the
/// lexicographically first is label 0. Every file in a class directory must
/// be a valid PPM. Images are resized to `pdim x pdim`.
pub fn load_dataset(root: &Path, pdim: usize) -> Result<Dataset> {
    if pdim == 0 {
        return Err(Error::InvalidArgument("pdim must be >= 1".into()));
    }
    let mut classes: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            classes.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    classes.sort();
    if classes.len() != 2 {
        return Err(Error::Dataset(format!(
            "{} must contain exactly two class directories, found {}",
            root.display(),
            classes.len()
        )));
    }
    let mut files: Vec<(String, u8, PathBuf)> = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut names = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if entry.path().is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        if names.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        names.sort();
        for n in names {
            files.push((format!("{name}/{n}"), label as u8, dir.join(&n)));
        }
    }
    let items: Vec<Item> = files
        .par_iter()
        .map(|(id, label, path)| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let (width, height, raw) = parse_ppm(&bytes).map_err(|e| e.in_file(path))?;
            Ok(Item {
                id: id.clone(),
                label: *label,
                width,
                height,
                pixels: raw.to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let resized: Vec<Tensor> = items
        .par_iter()
        .map(|it| {
            let t = Tensor::new(
                [it.height, it.width, 3],
                it.pixels.iter().map(|&b| b as f32).collect(),
            )?;
            bilinear_resize(&t, pdim, pdim)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = resized.iter().collect();
    Ok(Dataset {
        images: Tensor::stack(&refs)?,
        labels: items.iter().map(|it| it.label).collect(),
        ids: items.iter().map(|it| it.id.clone()).collect(),
        class_names: [classes[0].0.clone(), classes[1].0.clone()],
        digest: digest_items(&items),
        regions: vec![None; items.len()],
    })
}

/// `n` synthetic images (`n` even), alternating labels 0, 1, 0, ...
///
/// Class 0 ("dark") is a dark background with a bright disc, class 1
/// ("bright") a bright background with a dark disc, both with mild pixel
/// noise. Background and disc levels keep the two classes apart in mean
/// intensity. All draws come from streams keyed by `(seed, split, index)`,
/// so different `split` labels give disjoint-looking sets.
pub fn synth_blobs_split(n: usize, pdim: usize, seed: u64, split: &str) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("synthetic set size {n} must be even and > 0")));
    }
    if pdim < 8 {
        return Err(Error::InvalidArgument(format!("synthetic pdim {pdim} must be >= 8")));
    }
    let gen = |i: usize| -> (Item, Rect) {
        let mut rng = DetRng::new(seed, format!("synth/{split}/{i}"));
        let label = (i % 2) as u8;
        let (bg, fg) = if label == 0 {
            (rng.next_range(10.0, 70.0), rng.next_range(180.0, 250.0))
        } else {
            (rng.next_range(185.0, 245.0), rng.next_range(5.0, 75.0))
        };
        let p = pdim as f32;
        let r = rng.next_range(p / 10.0, p / 5.0);
        let cx = rng.next_range(r, p - 1.0 - r);
        let cy = rng.next_range(r, p - 1.0 - r);
        let mut pixels = Vec::with_capacity(pdim * pdim * 3);
        for y in 0..pdim {
            for x in 0..pdim {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let base = if dx * dx + dy * dy <= r * r { fg } else { bg };
                for _ in 0..3 {
                    pixels.push(to_byte(base + rng.next_range(-8.0, 8.0)));
                }
            }
        }
        let lo = |c: f32| (c - r).floor().max(0.0) as usize;
        let hi = |c: f32| ((c + r).ceil() as usize + 1).min(pdim);
        let rect = [lo(cx), lo(cy), hi(cx), hi(cy)];
        (
            Item {
                id: format!("synth/{split}/{i}"),
                label,
                width: pdim,
                height: pdim,
                pixels,
            },
            rect,
        )
    };
    let (items, rects): (Vec<Item>, Vec<Rect>) = (0..n).into_par_iter().map(gen).unzip();
    let mut data = Vec::with_capacity(n * pdim * pdim * 3);
    for it in &items {
        data.extend(it.pixels.iter().map(|&b| b as f32));
    }
    Ok(Dataset {
        images: Tensor::new([n, pdim, pdim, 3], data)?,
        labels: items.iter().map(|it| it.label).collect(),
        ids: items.iter().map(|it| it.id.clone()).collect(),
        class_names: ["dark".into(), "bright".into()],
        digest: digest_items(&items),
        regions: rects.into_iter().map(Some).collect(),
    })
}

pub fn synth_blobs(n: usize, pdim: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_split(n, pdim, seed, "train")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.dims(), &[1, 1, 3]);
        assert_eq!(t.data(), &[255.0; 3]);
    }

    #[test]
    fn comments_are_ignored() {
        let a = decode_ppm(b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let b = decode_ppm(b"P6\n# made by hand\n2 # width\n1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::PpmHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0"), Err(Error::PpmMaxval(65535))));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(Error::PpmTruncated { expected: 12, found: 3 })
        ));
        assert!(matches!(decode_ppm(b"P6\n2"), Err(Error::PpmHeader(_))));
    }

    #[test]
    fn encode_round_trip() {
        let mut rng = DetRng::new(3, "ppm");
        let data: Vec<f32> = (0..18).map(|_| rng.next_below(256) as f32).collect();
        let t = Tensor::new([3, 2, 3], data).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn synth_is_separable_by_mean_intensity() {
        let ds = synth_blobs(1000, 32, 1001).unwrap();
        let size = 32 * 32 * 3;
        for (i, &label) in ds.labels.iter().enumerate() {
            let img = &ds.images.data()[i * size..(i + 1) * size];
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / size as f64;
            assert_eq!(mean > 127.5, label == 1, "item {i} mean {mean}");
        }
        assert!(ds.balanced());
    }

    #[test]
    fn synth_digest_is_seeded() {
        let a = synth_blobs(4, 16, 7).unwrap();
        assert_eq!(a.digest, synth_blobs(4, 16, 7).unwrap().digest);
        assert_ne!(a.digest, synth_blobs(4, 16, 8).unwrap().digest);
        assert_ne!(a.digest, synth_blobs_split(4, 16, 7, "val").unwrap().digest);
        let two = synth_blobs(2, 16, 7).unwrap();
        assert_eq!(two.labels, [0, 1]);
    }
}
