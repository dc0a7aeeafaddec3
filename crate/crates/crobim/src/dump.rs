//! Attention dump files: flat little-endian f32 arrays with a shape header
//! (u32 dim count, u64 dims, then the payload), plus a tab-separated index.

use crate::error::{CrobimError, Result};
use crate::model::ForwardTrace;
use ndarray::{Array2, ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_array(path: &Path, values: &ArrayD<f64>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(4 + values.ndim() * 8 + values.len() * 4);
    buf.extend_from_slice(&(values.ndim() as u32).to_le_bytes());
    for d in values.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayD<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = || CrobimError::Data {
        record: path.display().to_string(),
        detail: "truncated dump file".into(),
    };
    if bytes.len() < 4 {
        return Err(fail());
    }
    let ndim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let mut pos = 4;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if pos + 8 > bytes.len() {
            return Err(fail());
        }
        dims.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
        pos += 8;
    }
    let len: usize = dims.iter().product();
    if pos + len * 4 != bytes.len() {
        return Err(fail());
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64);
        pos += 4;
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| CrobimError::Data {
        record: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Write the per-stage scores, saliency maps, deficit map, selected regions
/// and decoder attention maps for one sample. Returns the index entries.
pub fn dump_attention(
    dir: &Path,
    trace: &ForwardTrace,
    decoder_attn: &[(String, ArrayD<f64>)],
) -> Result<Vec<(String, String)>> {
    std::fs::create_dir_all(dir)?;
    let mut index: Vec<(String, String)> = Vec::new();
    let emit =
        |name: &str, values: &ArrayD<f64>, index: &mut Vec<(String, String)>| -> Result<()> {
            let file = format!("{}.bin", sanitize(name));
            write_array(&dir.join(&file), values)?;
            index.push((name.to_string(), file));
            Ok(())
        };
    for (i, s) in trace.scores.scores.iter().enumerate() {
        emit(&format!("S_{}", i + 1), &s.clone().into_dyn(), &mut index)?;
    }
    for (i, s) in trace.saliency.iter().enumerate() {
        emit(
            &format!("saliency_{}", i + 1),
            &s.clone().into_dyn(),
            &mut index,
        )?;
    }
    emit("deficit", &trace.deficit.clone().into_dyn(), &mut index)?;
    let mut regions = Array2::zeros((trace.regions.len(), 2));
    for (k, &(r, c)) in trace.regions.iter().enumerate() {
        regions[[k, 0]] = r as f64;
        regions[[k, 1]] = c as f64;
    }
    emit("regions", &regions.into_dyn(), &mut index)?;
    for (label, values) in decoder_attn {
        if label.starts_with("mid.") {
            emit(label, values, &mut index)?;
        }
    }
    let mut text = String::new();
    for (name, file) in &index {
        text.push_str(&format!("{name}\t{file}\n"));
    }
    std::fs::write(dir.join("index.tsv"), text)?;
    Ok(index)
}

/// Render a 2-d array as a heat-map PNG (dark-blue → yellow ramp after
/// min-max normalization).
pub fn render_heatmap(values: &Array2<f64>, path: &Path, scale: usize) -> Result<()> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let s = scale.max(1);
    let mut img = image::RgbImage::new((w * s) as u32, (h * s) as u32);
    for y in 0..h {
        for x in 0..w {
            let t = (values[[y, x]] - lo) / range;
            let px = image::Rgb([
                (40.0 + 200.0 * t) as u8,
                (40.0 + 180.0 * t * t) as u8,
                (120.0 * (1.0 - t) + 40.0) as u8,
            ]);
            for dy in 0..s {
                for dx in 0..s {
                    img.put_pixel((x * s + dx) as u32, (y * s + dy) as u32, px);
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| CrobimError::Data {
        record: path.display().to_string(),
        detail: format!("cannot write heatmap: {e}"),
    })
}
