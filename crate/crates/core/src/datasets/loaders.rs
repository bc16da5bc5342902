//! Image-tree loaders for the benchmark datasets.
//!
//! Expected layouts (documented in the README):
//! - Extended Yale B: one directory per subject (`yaleB01` ... `yaleB39`,
//!   38 present), each holding 64 illumination images (`*.pgm`/`*.png`,
//!   ambient shots excluded). Images are box-resampled to 48x42.
//! - ORL: directories `s1` ... `s40`, ten images each, resampled to 32x32.
//! - COIL-20/100: flat files `obj<id>__<angle>.<ext>`, 72 angles per
//!   object, kept at their stored resolution (the standard processed
//!   distribution is 32x32).
//!
//! Resampling is deterministic area averaging (a general fractional box
//! filter), chosen for alias resistance; the papers in this lineage do not
//! state their interpolation kernel.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{check_pixel_range, SampleSet};
use crate::error::{Error, Result};

/// Which COIL collection to ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoilVariant {
    Coil20,
    Coil100,
}

impl CoilVariant {
    fn objects(&self) -> usize {
        match self {
            CoilVariant::Coil20 => 20,
            CoilVariant::Coil100 => 100,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            CoilVariant::Coil20 => "coil20",
            CoilVariant::Coil100 => "coil100",
        }
    }
}

struct GrayBuffer {
    pixels: Vec<u8>,
    width: usize,
    height: usize,
}

fn decode_gray(path: &Path) -> Result<GrayBuffer> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (width, height) = gray.dimensions();
    Ok(GrayBuffer {
        pixels: gray.into_raw(),
        width: width as usize,
        height: height as usize,
    })
}

/// Fractional box filter: each destination pixel is the area-weighted mean
/// of the source pixels it covers, scaled to `[0, 1]`.
fn resample_area(src: &GrayBuffer, dst_h: usize, dst_w: usize) -> Vec<f64> {
    let (sh, sw) = (src.height, src.width);
    if sh == dst_h && sw == dst_w {
        return src.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    }
    let scale_y = sh as f64 / dst_h as f64;
    let scale_x = sw as f64 / dst_w as f64;
    let area = scale_y * scale_x;
    let mut out = vec![0.0f64; dst_h * dst_w];
    for dy in 0..dst_h {
        let y0 = dy as f64 * scale_y;
        let y1 = (dy + 1) as f64 * scale_y;
        let iy0 = y0.floor() as usize;
        let iy1 = (y1.ceil() as usize).min(sh);
        for dx in 0..dst_w {
            let x0 = dx as f64 * scale_x;
            let x1 = (dx + 1) as f64 * scale_x;
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(sw);
            let mut acc = 0.0;
            for iy in iy0..iy1 {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                let row = iy * sw;
                for ix in ix0..ix1 {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    acc += wy * wx * src.pixels[row + ix] as f64;
                }
            }
            out[dy * dst_w + dx] = acc / (area * 255.0);
        }
    }
    out
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref ext) if ext == "pgm" || ext == "png" || ext == "ppm" || ext == "pbm"
    )
}

fn sorted_subdirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| {
        Error::Ingestion(format!("cannot read dataset root {}: {e}", root.display()))
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

const YALEB_SUBJECTS: usize = 38;
const YALEB_IMAGES_PER_SUBJECT: usize = 64;
const YALEB_TARGET: (usize, usize) = (48, 42);

/// Loads `subject_count` consecutive Extended Yale B subjects starting at
/// 1-based `subject_start`, downsampled to 48x42 grayscale.
pub fn load_yaleb(root: &Path, subject_start: usize, subject_count: usize) -> Result<SampleSet> {
    if subject_start < 1
        || subject_count < 1
        || subject_start + subject_count - 1 > YALEB_SUBJECTS
    {
        return Err(Error::InvalidArgument(format!(
            "subjects {subject_start}..{} out of range 1..={YALEB_SUBJECTS}",
            subject_start + subject_count - 1
        )));
    }
    let dirs: Vec<PathBuf> = sorted_subdirs(root)?
        .into_iter()
        .filter(|d| {
            d.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("yaleB"))
                .unwrap_or(false)
        })
        .collect();
    if dirs.len() != YALEB_SUBJECTS {
        return Err(Error::Ingestion(format!(
            "expected {YALEB_SUBJECTS} subject directories under {}, found {}",
            root.display(),
            dirs.len()
        )));
    }

    let (th, tw) = YALEB_TARGET;
    let d = th * tw;
    let n = subject_count * YALEB_IMAGES_PER_SUBJECT;
    let mut x = Array2::<f64>::zeros((d, n));
    let mut labels = Vec::with_capacity(n);
    let mut col = 0usize;
    for (new_label, dir) in dirs[subject_start - 1..subject_start - 1 + subject_count]
        .iter()
        .enumerate()
    {
        let subject = dir.file_name().unwrap().to_string_lossy().to_string();
        let files: Vec<PathBuf> = sorted_images(dir)?
            .into_iter()
            .filter(|p| {
                !p.file_stem()
                    .and_then(|s| s.to_str())
                    .map(|s| s.contains("Ambient"))
                    .unwrap_or(false)
            })
            .collect();
        if files.len() != YALEB_IMAGES_PER_SUBJECT {
            return Err(Error::Ingestion(format!(
                "subject {subject}: expected {YALEB_IMAGES_PER_SUBJECT} images, found {}",
                files.len()
            )));
        }
        for file in files {
            let gray = decode_gray(&file)?;
            let pixels = resample_area(&gray, th, tw);
            for (r, v) in pixels.into_iter().enumerate() {
                x[[r, col]] = v;
            }
            labels.push(new_label);
            col += 1;
        }
    }

    check_pixel_range(&x, "yaleb")?;
    SampleSet::new(
        x,
        labels,
        (th, tw, 1),
        format!(
            "yaleb-s{:02}-{:02}",
            subject_start,
            subject_start + subject_count - 1
        ),
        subject_count,
    )
}

const ORL_SUBJECTS: usize = 40;
const ORL_IMAGES_PER_SUBJECT: usize = 10;
const ORL_TARGET: (usize, usize) = (32, 32);

/// Loads the 400-image ORL face set, downsampled to 32x32.
pub fn load_orl(root: &Path) -> Result<SampleSet> {
    let mut dirs: Vec<(usize, PathBuf)> = sorted_subdirs(root)?
        .into_iter()
        .filter_map(|d| {
            let name = d.file_name()?.to_str()?.to_string();
            let idx: usize = name.strip_prefix('s')?.parse().ok()?;
            Some((idx, d))
        })
        .collect();
    dirs.sort_by_key(|(idx, _)| *idx);
    if dirs.len() != ORL_SUBJECTS {
        return Err(Error::Ingestion(format!(
            "expected {ORL_SUBJECTS} subject directories (s1..s40) under {}, found {}",
            root.display(),
            dirs.len()
        )));
    }

    let (th, tw) = ORL_TARGET;
    let d = th * tw;
    let n = ORL_SUBJECTS * ORL_IMAGES_PER_SUBJECT;
    let mut x = Array2::<f64>::zeros((d, n));
    let mut labels = Vec::with_capacity(n);
    let mut col = 0usize;
    for (new_label, (idx, dir)) in dirs.iter().enumerate() {
        let mut files: Vec<(usize, PathBuf)> = sorted_images(dir)?
            .into_iter()
            .enumerate()
            .map(|(fallback, p)| {
                let numeric = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse::<usize>().ok());
                (numeric.unwrap_or(fallback), p)
            })
            .collect();
        files.sort_by_key(|(order, _)| *order);
        if files.len() != ORL_IMAGES_PER_SUBJECT {
            return Err(Error::Ingestion(format!(
                "subject s{idx}: expected {ORL_IMAGES_PER_SUBJECT} images, found {}",
                files.len()
            )));
        }
        for (_, file) in files {
            let gray = decode_gray(&file)?;
            let pixels = resample_area(&gray, th, tw);
            for (r, v) in pixels.into_iter().enumerate() {
                x[[r, col]] = v;
            }
            labels.push(new_label);
            col += 1;
        }
    }

    check_pixel_range(&x, "orl")?;
    SampleSet::new(x, labels, (th, tw, 1), "orl".into(), ORL_SUBJECTS)
}

const COIL_IMAGES_PER_OBJECT: usize = 72;

/// Loads COIL-20 or COIL-100 from a flat `obj<id>__<angle>` file layout.
/// Images are grayscaled but kept at their stored resolution.
pub fn load_coil(root: &Path, variant: CoilVariant) -> Result<SampleSet> {
    let objects = variant.objects();
    let entries = std::fs::read_dir(root).map_err(|e| {
        Error::Ingestion(format!("cannot read dataset root {}: {e}", root.display()))
    })?;
    let mut by_object: Vec<Vec<(usize, PathBuf)>> = vec![Vec::new(); objects];
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s,
            None => continue,
        };
        let Some(rest) = stem.strip_prefix("obj") else {
            continue;
        };
        let Some((id_str, angle_str)) = rest.split_once("__") else {
            continue;
        };
        let (Ok(id), Ok(angle)) = (id_str.parse::<usize>(), angle_str.parse::<usize>()) else {
            continue;
        };
        if id == 0 || id > objects {
            return Err(Error::Ingestion(format!(
                "object id {id} out of range 1..={objects} in {}",
                path.display()
            )));
        }
        by_object[id - 1].push((angle, path));
    }

    let mut first_dims: Option<(usize, usize)> = None;
    let mut columns: Vec<(usize, Vec<f64>)> = Vec::with_capacity(objects * COIL_IMAGES_PER_OBJECT);
    for (obj_idx, files) in by_object.iter_mut().enumerate() {
        if files.len() != COIL_IMAGES_PER_OBJECT {
            return Err(Error::Ingestion(format!(
                "object {}: expected {COIL_IMAGES_PER_OBJECT} images, found {}",
                obj_idx + 1,
                files.len()
            )));
        }
        files.sort_by_key(|(angle, _)| *angle);
        for (_, path) in files.iter() {
            let gray = decode_gray(path)?;
            match first_dims {
                None => first_dims = Some((gray.height, gray.width)),
                Some((h, w)) => {
                    if (gray.height, gray.width) != (h, w) {
                        return Err(Error::Ingestion(format!(
                            "{}: image is {}x{} but the collection started at {h}x{w}",
                            path.display(),
                            gray.height,
                            gray.width
                        )));
                    }
                }
            }
            let pixels: Vec<f64> = gray.pixels.iter().map(|&p| p as f64 / 255.0).collect();
            columns.push((obj_idx, pixels));
        }
    }

    let (h, w) = first_dims.ok_or_else(|| {
        Error::Ingestion(format!("no COIL images found under {}", root.display()))
    })?;
    let d = h * w;
    let n = columns.len();
    let mut x = Array2::<f64>::zeros((d, n));
    let mut labels = Vec::with_capacity(n);
    for (col, (label, pixels)) in columns.into_iter().enumerate() {
        for (r, v) in pixels.into_iter().enumerate() {
            x[[r, col]] = v;
        }
        labels.push(label);
    }

    check_pixel_range(&x, variant.name())?;
    SampleSet::new(x, labels, (h, w, 1), variant.name().into(), objects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_pgm(path: &Path, width: usize, height: usize, value: impl Fn(usize, usize) -> u8) {
        let mut file = std::fs::File::create(path).unwrap();
        write!(file, "P5\n{width} {height}\n255\n").unwrap();
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(value(y, x));
            }
        }
        file.write_all(&pixels).unwrap();
    }

    fn build_yaleb_tree(root: &Path, per_subject: usize) {
        // Real trees skip yaleB14; mirror that quirk.
        let mut made = 0usize;
        let mut idx = 1usize;
        while made < 38 {
            if idx == 14 {
                idx += 1;
                continue;
            }
            let dir = root.join(format!("yaleB{idx:02}"));
            std::fs::create_dir_all(&dir).unwrap();
            for img in 0..per_subject {
                let path = dir.join(format!("yaleB{idx:02}_P00A+{img:03}E+00.pgm"));
                let shade = (made * 5) as u8;
                write_pgm(&path, 42, 48, |_, _| shade);
            }
            // Ambient shots must be ignored by the loader.
            write_pgm(&dir.join(format!("yaleB{idx:02}_P00_Ambient.pgm")), 42, 48, |_, _| 0);
            made += 1;
            idx += 1;
        }
    }

    #[test]
    fn resample_exact_box_average() {
        let src = GrayBuffer {
            pixels: vec![10, 30, 50, 70, 90, 110, 130, 150, 170, 190, 210, 230, 8, 16, 24, 32],
            width: 4,
            height: 4,
        };
        let out = resample_area(&src, 2, 2);
        let expect = |vals: [u8; 4]| vals.iter().map(|&v| v as f64).sum::<f64>() / 4.0 / 255.0;
        assert_relative_eq!(out[0], expect([10, 30, 90, 110]), max_relative = 1e-12);
        assert_relative_eq!(out[1], expect([50, 70, 130, 150]), max_relative = 1e-12);
        assert_relative_eq!(out[2], expect([170, 190, 8, 16]), max_relative = 1e-12);
        assert_relative_eq!(out[3], expect([210, 230, 24, 32]), max_relative = 1e-12);
    }

    #[test]
    fn resample_fractional_preserves_constant_images() {
        let src = GrayBuffer {
            pixels: vec![77u8; 112 * 92],
            width: 92,
            height: 112,
        };
        let out = resample_area(&src, 32, 32);
        assert_eq!(out.len(), 32 * 32);
        for v in out {
            assert_relative_eq!(v, 77.0 / 255.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn resample_fractional_conserves_mass() {
        // Mean intensity is invariant under area resampling.
        let src = GrayBuffer {
            pixels: (0..11 * 7).map(|i| (i * 13 % 251) as u8).collect(),
            width: 7,
            height: 11,
        };
        let src_mean =
            src.pixels.iter().map(|&p| p as f64).sum::<f64>() / (11.0 * 7.0) / 255.0;
        let out = resample_area(&src, 5, 3);
        let dst_mean = out.iter().sum::<f64>() / out.len() as f64;
        assert_relative_eq!(src_mean, dst_mean, max_relative = 1e-10);
    }

    #[test]
    fn yaleb_loads_subjects_with_renumbered_labels() {
        let dir = tempfile::tempdir().unwrap();
        build_yaleb_tree(dir.path(), 64);
        let set = load_yaleb(dir.path(), 3, 4).unwrap();
        assert_eq!(set.n(), 4 * 64);
        assert_eq!(set.k, 4);
        assert_eq!(set.image_shape, (48, 42, 1));
        assert_eq!(set.class_counts(), vec![64; 4]);
        // Subject 3 is the third directory (shade (3-1)*5 = 10).
        assert_relative_eq!(set.x[[0, 0]], 10.0 / 255.0, max_relative = 1e-10);
        assert!(set.labels[..64].iter().all(|&l| l == 0));

        // Determinism: a second load is identical.
        let again = load_yaleb(dir.path(), 3, 4).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn yaleb_rejects_out_of_range_subjects() {
        let dir = tempfile::tempdir().unwrap();
        build_yaleb_tree(dir.path(), 64);
        assert!(matches!(
            load_yaleb(dir.path(), 35, 10),
            Err(Error::InvalidArgument(_))
        ));
        assert!(load_yaleb(dir.path(), 0, 5).is_err());
    }

    #[test]
    fn yaleb_names_subject_with_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        build_yaleb_tree(dir.path(), 64);
        // Drop one image from subject directory yaleB05.
        let victim = dir.path().join("yaleB05").join("yaleB05_P00A+010E+00.pgm");
        std::fs::remove_file(&victim).unwrap();
        match load_yaleb(dir.path(), 1, 10) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("yaleB05"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_image_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        build_yaleb_tree(dir.path(), 64);
        let victim = dir.path().join("yaleB01").join("yaleB01_P00A+000E+00.pgm");
        std::fs::write(&victim, b"not an image at all").unwrap();
        match load_yaleb(dir.path(), 1, 2) {
            Err(Error::ImageDecode { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn orl_loads_forty_subjects_of_ten() {
        let dir = tempfile::tempdir().unwrap();
        for s in 1..=40 {
            let sub = dir.path().join(format!("s{s}"));
            std::fs::create_dir_all(&sub).unwrap();
            for img in 1..=10 {
                write_pgm(&sub.join(format!("{img}.pgm")), 46, 56, |_, _| (s * 3) as u8);
            }
        }
        let set = load_orl(dir.path()).unwrap();
        assert_eq!(set.n(), 400);
        assert_eq!(set.k, 40);
        assert_eq!(set.image_shape, (32, 32, 1));
        assert_eq!(set.class_counts(), vec![10; 40]);
        // Numeric directory ordering: s2 must precede s10.
        assert_relative_eq!(set.x[[5, 10]], 6.0 / 255.0, max_relative = 1e-10);
    }

    #[test]
    fn orl_missing_root_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(load_orl(&missing), Err(Error::Ingestion(_))));
    }

    #[test]
    fn coil_loads_objects_at_stored_resolution() {
        let dir = tempfile::tempdir().unwrap();
        for obj in 1..=20 {
            for angle in (0..360).step_by(5) {
                let img = image::GrayImage::from_pixel(32, 32, image::Luma([obj as u8 * 2]));
                img.save(dir.path().join(format!("obj{obj}__{angle}.png")))
                    .unwrap();
            }
        }
        let set = load_coil(dir.path(), CoilVariant::Coil20).unwrap();
        assert_eq!(set.n(), 1440);
        assert_eq!(set.k, 20);
        assert_eq!(set.image_shape, (32, 32, 1));
        assert_eq!(set.class_counts(), vec![72; 20]);
    }

    #[test]
    fn coil_counts_images_per_object() {
        let dir = tempfile::tempdir().unwrap();
        for obj in 1..=20 {
            let count = if obj == 7 { 71 } else { 72 };
            for i in 0..count {
                let img = image::GrayImage::from_pixel(8, 8, image::Luma([obj as u8]));
                img.save(dir.path().join(format!("obj{obj}__{}.png", i * 5)))
                    .unwrap();
            }
        }
        match load_coil(dir.path(), CoilVariant::Coil20) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("object 7"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
