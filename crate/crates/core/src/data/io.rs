use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Normalization, Task};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Column layout of a dataset CSV: `x0..x{d−1},y0..y{k−1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub d: usize,
    pub k: usize,
    pub task: Task,
}

fn header(d: usize, k: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).chain((0..k).map(|j| format!("y{j}"))).collect()
}

/// Reads a dataset CSV, preserving row order.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let want = header(schema.d, schema.k);
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if got.is_empty() || got == [""] {
        return Err(Error::Parse { line: 1, msg: "missing header row".into() });
    }
    if got != want {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header {:?} does not match schema {:?}", got, want),
        });
    }
    let width = schema.d + schema.k;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} cells, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell {cell:?} in column {j}"),
            })?;
            if j < schema.d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = xs.len() / schema.d.max(1);
    if n == 0 {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    Dataset::new(
        Matrix::from_vec(n, schema.d, xs)?,
        Matrix::from_vec(n, schema.k, ys)?,
        schema.task,
        format!("csv:{}", path.display()),
    )
}

/// Writes a dataset as CSV with the `x0..,y0..` header. Values use the
/// shortest round-trip representation.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&header(ds.d(), ds.k()).join(","));
    out.push('\n');
    for i in 0..ds.n() {
        let cells: Vec<String> = ds.x.row(i).iter().chain(ds.y.row(i)).map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps two digit classes and maps them to labels `+1` and `−1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassFilter {
    pub positive: u8,
    pub negative: u8,
}

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
///
/// Without a filter the targets are the raw digit values (regression
/// task); with one, only the two kept digits remain, labelled ±1. At most
/// `max_n` rows are returned, in file order.
pub fn load_mnist_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    filter: Option<ClassFilter>,
    max_n: Option<usize>,
) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lab = fs::read(lp).map_err(|e| Error::io(lp, e))?;

    let magic = be_u32(&img, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("image magic {magic}, expected {IMAGE_MAGIC}"),
        });
    }
    let count = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let size = rows * cols;
    let need = 16 + count * size;
    if img.len() < need {
        return Err(Error::Format {
            offset: img.len() as u64,
            msg: format!("image payload truncated: {} bytes, header implies {need}", img.len()),
        });
    }

    let lmagic = be_u32(&lab, 0)?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label magic {lmagic}, expected {LABEL_MAGIC}"),
        });
    }
    let lcount = be_u32(&lab, 4)? as usize;
    if lcount != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{lcount} labels for {count} images"),
        });
    }
    if lab.len() < 8 + count {
        return Err(Error::Format {
            offset: lab.len() as u64,
            msg: "label payload truncated".into(),
        });
    }

    let cap = max_n.unwrap_or(usize::MAX);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..count {
        if ys.len() == cap {
            break;
        }
        let digit = lab[8 + i];
        let y = match filter {
            None => f64::from(digit),
            Some(f) if digit == f.positive => 1.0,
            Some(f) if digit == f.negative => -1.0,
            Some(_) => continue,
        };
        xs.extend(img[16 + i * size..16 + (i + 1) * size].iter().map(|&b| f64::from(b) / 255.0));
        ys.push(y);
    }
    let n = ys.len();
    if n == 0 {
        return Err(Error::domain("no images matched the class filter"));
    }
    let task = if filter.is_some() {
        Task::Classification
    } else {
        Task::Regression
    };
    let mut ds = Dataset::new(
        Matrix::from_vec(n, size, xs)?,
        Matrix::from_vec(n, 1, ys)?,
        task,
        format!("idx:{}", ip.display()),
    )?;
    ds.normalization = Normalization::Scale255;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(dir: &Path, magic: u32, n: u32, pixels: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut img = Vec::new();
        img.extend(magic.to_be_bytes());
        img.extend(n.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend(pixels);
        let mut lab = Vec::new();
        lab.extend(LABEL_MAGIC.to_be_bytes());
        lab.extend(n.to_be_bytes());
        lab.extend(labels);
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        let (ip, lp) = write_idx(dir.path(), IMAGE_MAGIC, 3, &px, &[3, 5, 7]);
        let all = load_mnist_idx(&ip, &lp, None, None).unwrap();
        assert_eq!(all.n(), 3);
        assert!(all.x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let bin = load_mnist_idx(&ip, &lp, Some(ClassFilter { positive: 3, negative: 5 }), None).unwrap();
        assert_eq!(bin.y.as_slice(), &[1.0, -1.0]);
        assert_eq!(load_mnist_idx(&ip, &lp, None, Some(2)).unwrap().n(), 2);

        let (ip, lp) = write_idx(dir.path(), 2050, 3, &px, &[3, 5, 7]);
        assert!(matches!(load_mnist_idx(&ip, &lp, None, None), Err(Error::Format { offset: 0, .. })));
        let (ip, lp) = write_idx(dir.path(), IMAGE_MAGIC, 3, &px[..10], &[3, 5, 7]);
        assert!(matches!(load_mnist_idx(&ip, &lp, None, None), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = Dataset::new(
            Matrix::from_rows(&[vec![0.1, -2.5], vec![1e-300, 3.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 0.25]]).unwrap(),
            Task::Regression,
            "t",
        )
        .unwrap();
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p, CsvSchema { d: 2, k: 2, task: Task::Regression }).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn csv_errors_carry_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let schema = CsvSchema { d: 1, k: 1, task: Task::Regression };
        fs::write(&p, "").unwrap();
        assert!(matches!(load_csv(&p, schema), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "x0,y0\n1,2\n3\n").unwrap();
        assert!(matches!(load_csv(&p, schema), Err(Error::Parse { line: 3, .. })));
        fs::write(&p, "x0,y0\n1,2\nfoo,4\n").unwrap();
        assert!(matches!(load_csv(&p, schema), Err(Error::Parse { line: 3, .. })));
    }
}
