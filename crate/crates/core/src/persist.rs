//! On-disk forms of fitted artifacts. Each file starts with one text line
//! `MAGIC key=value ...` followed by one or more WRDESC payloads.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aggregation::{GlobalDescriptor, WhiteningTransform};
use crate::codebook::Codebook;
use crate::corpus::EntityId;
use crate::encoding::NetVladParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wrdesc::{RowLabel, WrDesc};

pub const CODEBOOK_MAGIC: &str = "WRCODEBOOK";
pub const NETVLAD_MAGIC: &str = "WRNETVLAD";
pub const WHITENING_MAGIC: &str = "WRWHITEN";

/// Header key/value pairs.
pub type Header = BTreeMap<String, String>;

fn write_header_line<W: Write>(w: &mut W, magic: &str, header: &Header) -> Result<()> {
    let mut line = magic.to_string();
    for (k, v) in header {
        if k.contains([' ', '=', '\n']) || v.contains([' ', '\n']) {
            return Err(Error::Format(format!("unencodable header field {k}={v}")));
        }
        line.push_str(&format!(" {k}={v}"));
    }
    line.push('\n');
    w.write_all(line.as_bytes())?;
    Ok(())
}

fn read_header_line<R: BufRead>(r: &mut R, magic: &str) -> Result<Header> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.trim_end_matches('\n').split(' ');
    if parts.next() != Some(magic) {
        return Err(Error::Format(format!("expected {magic} header")));
    }
    let mut out = Header::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {p:?}")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn header_usize(h: &Header, key: &str) -> Result<usize> {
    h.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("missing or invalid header field {key}")))
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(())
}

fn rows_payload<T: Scalar>(dim: usize, flat: &[T], tag: &str) -> Result<WrDesc> {
    let mut d = WrDesc::new(dim);
    for (i, row) in flat.chunks(dim.max(1)).enumerate() {
        let r: Vec<f32> = row.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        d.push(&r, RowLabel::new(tag, i as i64, 0))?;
    }
    Ok(d)
}

fn payload_values<T: Scalar>(d: &WrDesc, dim: usize, rows: usize) -> Result<Vec<T>> {
    if d.dim != dim || d.count() != rows {
        return Err(Error::Format(format!(
            "payload is {}x{}, expected {rows}x{dim}",
            d.count(),
            d.dim
        )));
    }
    Ok(d.rows.iter().map(|&v| T::lit(v as f64)).collect())
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(std::fs::File::create(path)?))
}

pub fn save_codebook<T: Scalar>(path: &Path, cb: &Codebook<T>, extra: &Header) -> Result<()> {
    let mut h = extra.clone();
    h.insert("n_clusters".into(), cb.n_clusters().to_string());
    h.insert("dim".into(), cb.dim().to_string());
    h.insert("seed".into(), cb.seed().to_string());
    let mut w = create(path)?;
    write_header_line(&mut w, CODEBOOK_MAGIC, &h)?;
    rows_payload(cb.dim(), cb.centers(), "center")?.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_codebook<T: Scalar>(path: &Path) -> Result<(Codebook<T>, Header)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let h = read_header_line(&mut r, CODEBOOK_MAGIC)?;
    let (k, dim) = (header_usize(&h, "n_clusters")?, header_usize(&h, "dim")?);
    let seed = h.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let d = WrDesc::read_from(&mut r)?;
    expect_eof(&mut r)?;
    Ok((Codebook::from_centers(dim, payload_values(&d, dim, k)?, seed)?, h))
}

pub fn save_netvlad<T: Scalar>(path: &Path, p: &NetVladParams<T>, extra: &Header) -> Result<()> {
    p.validate()?;
    let mut h = extra.clone();
    h.insert("n_clusters".into(), p.n_clusters.to_string());
    h.insert("dim".into(), p.dim.to_string());
    let mut w = create(path)?;
    write_header_line(&mut w, NETVLAD_MAGIC, &h)?;
    rows_payload(p.dim, &p.centers, "center")?.write_to(&mut w)?;
    rows_payload(p.dim, &p.weights, "weight")?.write_to(&mut w)?;
    rows_payload(p.n_clusters, &p.biases, "bias")?.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_netvlad<T: Scalar>(path: &Path) -> Result<(NetVladParams<T>, Header)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let h = read_header_line(&mut r, NETVLAD_MAGIC)?;
    let (k, dim) = (header_usize(&h, "n_clusters")?, header_usize(&h, "dim")?);
    let c = WrDesc::read_from(&mut r)?;
    let w = WrDesc::read_from(&mut r)?;
    let b = WrDesc::read_from(&mut r)?;
    expect_eof(&mut r)?;
    let p = NetVladParams {
        n_clusters: k,
        dim,
        centers: payload_values(&c, dim, k)?,
        weights: payload_values(&w, dim, k)?,
        biases: payload_values(&b, k, 1)?,
    };
    p.validate()?;
    Ok((p, h))
}

pub fn save_whitening<T: Scalar>(path: &Path, t: &WhiteningTransform<T>, extra: &Header) -> Result<()> {
    let mut h = extra.clone();
    h.insert("in_dim".into(), t.in_dim.to_string());
    h.insert("out_dim".into(), t.out_dim.to_string());
    h.insert("epsilon".into(), format!("{:e}", t.epsilon));
    let mut w = create(path)?;
    write_header_line(&mut w, WHITENING_MAGIC, &h)?;
    rows_payload(t.in_dim, &t.mean, "mean")?.write_to(&mut w)?;
    rows_payload(t.in_dim, &t.projection, "axis")?.write_to(&mut w)?;
    rows_payload(t.out_dim, &t.eigenvalues, "eigenvalue")?.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_whitening<T: Scalar>(path: &Path) -> Result<(WhiteningTransform<T>, Header)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let h = read_header_line(&mut r, WHITENING_MAGIC)?;
    let (in_dim, out_dim) = (header_usize(&h, "in_dim")?, header_usize(&h, "out_dim")?);
    let epsilon = h
        .get("epsilon")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("missing epsilon".into()))?;
    let mean = WrDesc::read_from(&mut r)?;
    let proj = WrDesc::read_from(&mut r)?;
    let eig = WrDesc::read_from(&mut r)?;
    expect_eof(&mut r)?;
    Ok((
        WhiteningTransform {
            in_dim,
            out_dim,
            epsilon,
            mean: payload_values(&mean, in_dim, 1)?,
            projection: payload_values(&proj, in_dim, out_dim)?,
            eigenvalues: payload_values(&eig, out_dim, 1)?,
        },
        h,
    ))
}

/// One row per entity, labelled with the entity id.
pub fn globals_to_wrdesc<T: Scalar>(descs: &[GlobalDescriptor<T>]) -> Result<WrDesc> {
    let dim = descs.first().map_or(0, |d| d.values.len());
    let mut out = WrDesc::new(dim);
    for d in descs {
        let row: Vec<f32> = d.values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        out.push(&row, RowLabel::new(d.entity.to_string(), 0, 0))?;
    }
    Ok(out)
}

pub fn globals_from_wrdesc<T: Scalar>(d: &WrDesc) -> Result<Vec<GlobalDescriptor<T>>> {
    (0..d.count())
        .map(|i| {
            let entity: EntityId = d.labels[i].label.parse()?;
            Ok(GlobalDescriptor {
                entity,
                values: d.row(i).iter().map(|&v| T::lit(v as f64)).collect(),
            })
        })
        .collect()
}
