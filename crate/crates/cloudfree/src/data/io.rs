//! Dataset persistence. Layout under a root directory:
//!
//! ```text
//! root/synthconfig.txt        # the generating SynthConfig, TOML
//! root/manifest.txt           # one `<split> <relative path>` line per scene
//! root/{train,val,test}/scene_<id>.bin
//! ```
//!
//! A sample file is a plain-text header followed by raw data:
//!
//! ```text
//! cloudfree-sample v1
//! scene <id>
//! split <train|val|test>
//! dates <d0> <d1> …
//! x <T> <C> <H> <W>
//! y <K> <H> <W>
//! masks <T> <H> <W>
//! data
//! <x as little-endian f32><y as little-endian f32><masks as single bytes>
//! ```

use super::{generate_scene, MultiTempSample, SampleMeta, SplitTag, SynthConfig};
use crate::{par, Error, Result};
use ndarray::{Array3, Array4};
use std::path::{Path, PathBuf};
use std::str::FromStr;

const SAMPLE_MAGIC: &str = "cloudfree-sample v1";

/// Generate every scene of `cfg` under `root`. Scenes are generated in
/// parallel (each from its own RNG substream) but written in id order, so
/// the directory contents are identical either way.
pub fn write_dataset(cfg: &SynthConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for split in SplitTag::ALL {
        std::fs::create_dir_all(root.join(split.dir_name()))?;
    }
    crate::cfgfile::save(cfg, &root.join("synthconfig.txt"))?;

    let samples = par::map_collect(cfg.n_scenes, |id| generate_scene(cfg, id as u64));
    let mut manifest = String::new();
    for sample in samples {
        let sample = sample?;
        let rel = format!("{}/scene_{}.bin", sample.meta.split.dir_name(), sample.meta.scene_id);
        write_sample(&sample, &root.join(&rel))?;
        manifest.push_str(&format!("{} {rel}\n", sample.meta.split));
    }
    std::fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Parse `root/manifest.txt` into `(split, absolute path)` rows, in file
/// order (ascending scene id, the write order).
pub fn manifest(root: &Path) -> Result<Vec<(SplitTag, PathBuf)>> {
    let path = root.join("manifest.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Load { path: path.clone(), reason: format!("read failed: {e}") })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (split, rel) = line.split_once(' ').ok_or_else(|| Error::Load {
            path: path.clone(),
            reason: format!("line {}: expected `<split> <path>`, got `{line}`", i + 1),
        })?;
        rows.push((SplitTag::from_str(split)?, root.join(rel)));
    }
    Ok(rows)
}

/// Load the `index`-th sample of `split`, counting in manifest order.
pub fn read_sample(root: &Path, split: SplitTag, index: usize) -> Result<MultiTempSample> {
    let rows = manifest(root)?;
    let path = rows
        .iter()
        .filter(|(s, _)| *s == split)
        .nth(index)
        .map(|(_, p)| p.clone())
        .ok_or_else(|| {
            let total = rows.iter().filter(|(s, _)| *s == split).count();
            Error::NotFound(format!("sample {index} of split {split} (it has {total} samples)"))
        })?;
    read_sample_file(&path)
}

/// Load every sample of a split, in manifest order.
pub fn read_split(root: &Path, split: SplitTag) -> Result<Vec<MultiTempSample>> {
    manifest(root)?
        .into_iter()
        .filter(|(s, _)| *s == split)
        .map(|(_, p)| read_sample_file(&p))
        .collect()
}

fn write_sample(sample: &MultiTempSample, path: &Path) -> Result<()> {
    let (t, c, h, w) = sample.x.dim();
    let (k, yh, yw) = sample.y.dim();
    let dates =
        sample.meta.dates.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ");
    let mut header = format!(
        "{SAMPLE_MAGIC}\nscene {}\nsplit {}\ndates {dates}\n",
        sample.meta.scene_id, sample.meta.split
    );
    header.push_str(&format!("x {t} {c} {h} {w}\n"));
    header.push_str(&format!("y {k} {yh} {yw}\n"));
    header.push_str(&format!("masks {t} {h} {w}\n"));
    header.push_str("data\n");

    let mut bytes = header.into_bytes();
    bytes.reserve(sample.x.len() * 4 + sample.y.len() * 4 + sample.masks.len());
    for v in sample.x.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.y.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(sample.masks.iter().copied());
    std::fs::write(path, bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: format!("write failed: {e}"),
    })
}

fn read_sample_file(path: &Path) -> Result<MultiTempSample> {
    let bad =
        |reason: String| Error::Load { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| bad(format!("read failed: {e}")))?;

    let mut pos = 0usize;
    let line = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("truncated header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| bad("non-UTF-8 header".into()))?
            .to_owned();
        *pos += 1;
        Ok(s)
    };
    let field = |l: String, name: &str| -> Result<String> {
        l.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("expected `{name} …` line")))
    };
    let numbers = |text: &str| -> Result<Vec<usize>> {
        text.split(' ')
            .map(|n| n.parse::<usize>().map_err(|e| bad(format!("bad number `{n}`: {e}"))))
            .collect()
    };

    if line(&bytes, &mut pos)? != SAMPLE_MAGIC {
        return Err(bad("not a sample file (bad magic line)".into()));
    }
    let scene_id: u64 = field(line(&bytes, &mut pos)?, "scene")?
        .parse()
        .map_err(|e| bad(format!("bad scene id: {e}")))?;
    let split = SplitTag::from_str(&field(line(&bytes, &mut pos)?, "split")?)?;
    let dates = numbers(&field(line(&bytes, &mut pos)?, "dates")?)?;
    let xd = numbers(&field(line(&bytes, &mut pos)?, "x")?)?;
    let yd = numbers(&field(line(&bytes, &mut pos)?, "y")?)?;
    let md = numbers(&field(line(&bytes, &mut pos)?, "masks")?)?;
    if line(&bytes, &mut pos)? != "data" {
        return Err(bad("missing data section".into()));
    }
    let ([t, c, h, w], [k, yh, yw], [mt, mh, mw]) = (
        <[usize; 4]>::try_from(xd).map_err(|_| bad("x wants 4 dimensions".into()))?,
        <[usize; 3]>::try_from(yd).map_err(|_| bad("y wants 3 dimensions".into()))?,
        <[usize; 3]>::try_from(md).map_err(|_| bad("masks wants 3 dimensions".into()))?,
    );
    if dates.len() != t || (yh, yw) != (h, w) || (mt, mh, mw) != (t, h, w) || k > c {
        return Err(bad(format!(
            "inconsistent shapes: x {t}×{c}×{h}×{w}, y {k}×{yh}×{yw}, masks {mt}×{mh}×{mw}, {} dates",
            dates.len()
        )));
    }

    let want = (t * c * h * w + k * h * w) * 4 + t * h * w;
    if bytes.len() - pos != want {
        return Err(bad(format!(
            "data section holds {} bytes, the shapes want {want}",
            bytes.len() - pos
        )));
    }
    let mut floats = |n: usize| -> Vec<f32> {
        let out = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        pos += 4 * n;
        out
    };
    let x = Array4::from_shape_vec((t, c, h, w), floats(t * c * h * w)).expect("sized above");
    let y = Array3::from_shape_vec((k, h, w), floats(k * h * w)).expect("sized above");
    let masks = Array3::from_shape_vec((t, h, w), bytes[pos..].to_vec()).expect("sized above");
    if masks.iter().any(|&m| m > 1) {
        return Err(bad("masks are not binary".into()));
    }
    Ok(MultiTempSample { x, y, masks, meta: SampleMeta { scene_id, split, dates } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg() -> SynthConfig {
        SynthConfig { n_scenes: 10, t: 2, k: 2, c_s1: 1, h: 8, w: 8, ..SynthConfig::default() }
    }

    #[test]
    fn write_then_read_round_trips_bit_exactly() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&cfg, dir.path()).unwrap();

        let rows = manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), cfg.n_scenes);
        let mut seen = HashSet::new();
        for (split, path) in &rows {
            let sample = read_sample_file(path).unwrap();
            assert_eq!(sample.meta.split, *split);
            assert!(seen.insert(sample.meta.scene_id), "scene listed twice");
            // The file must reproduce the generator output exactly.
            assert_eq!(sample, generate_scene(&cfg, sample.meta.scene_id).unwrap());
        }
        assert_eq!(seen.len(), cfg.n_scenes);

        let [n_train, n_val, n_test] = cfg.split_sizes();
        assert_eq!(read_split(dir.path(), SplitTag::Train).unwrap().len(), n_train);
        assert_eq!(read_split(dir.path(), SplitTag::Val).unwrap().len(), n_val);
        assert_eq!(read_split(dir.path(), SplitTag::Test).unwrap().len(), n_test);
    }

    #[test]
    fn rewriting_produces_identical_bytes() {
        let cfg = small_cfg();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&cfg, a.path()).unwrap();
        write_dataset(&cfg, b.path()).unwrap();
        for name in ["manifest.txt", "synthconfig.txt"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
        for (_, path) in manifest(a.path()).unwrap() {
            let rel = path.strip_prefix(a.path()).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel:?} differs between runs"
            );
        }
    }

    #[test]
    fn missing_samples_and_corrupt_files_error_out() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&cfg, dir.path()).unwrap();

        assert!(matches!(
            read_sample(dir.path(), SplitTag::Test, 999),
            Err(Error::NotFound(_))
        ));

        // Truncate one sample: the byte-count check has to catch it.
        let (_, victim) = manifest(dir.path()).unwrap().remove(0);
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(read_sample_file(&victim), Err(Error::Load { .. })));

        std::fs::write(&victim, b"junk").unwrap();
        assert!(matches!(read_sample_file(&victim), Err(Error::Load { .. })));
    }

    #[test]
    fn round_trip_through_public_reader_matches_generator() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&cfg, dir.path()).unwrap();
        let sample = read_sample(dir.path(), SplitTag::Train, 0).unwrap();
        assert_eq!(sample, generate_scene(&cfg, sample.meta.scene_id).unwrap());
        assert_eq!(sample.meta.split, SplitTag::Train);
    }
}
