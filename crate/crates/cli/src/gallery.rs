//! Row-major PNG grids of generated images, the artifact equivalent of a
//! contact sheet.

use std::path::Path;

use tinv_core::codec::IMG_SIZE;
use tinv_core::data::PIXELS_PER_IMAGE;
use tinv_core::error::{Error, Result};

/// Tile planar 8-bit RGB images (each 3 x 32 x 32) into one PNG with
/// `cols` tiles per row, row-major, unused tiles black. Metadata pairs
/// become PNG text chunks, which is where the config hash and seed ride.
pub fn emit_gallery(
    images: &[Vec<u8>],
    cols: usize,
    path: &Path,
    metadata: &[(&str, &str)],
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("emit_gallery: no images"));
    }
    if cols == 0 {
        return Err(Error::invalid("emit_gallery: cols must be >= 1"));
    }
    for (i, img) in images.iter().enumerate() {
        if img.len() != PIXELS_PER_IMAGE {
            return Err(Error::invalid(format!(
                "emit_gallery: image {i} has {} bytes, want {PIXELS_PER_IMAGE}",
                img.len()
            )));
        }
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * IMG_SIZE, rows * IMG_SIZE);
    let mut canvas = vec![0u8; w * h * 3]; // interleaved RGB
    let plane = IMG_SIZE * IMG_SIZE;
    for (i, img) in images.iter().enumerate() {
        let (tr, tc) = (i / cols, i % cols);
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                let src = y * IMG_SIZE + x;
                let dst = ((tr * IMG_SIZE + y) * w + tc * IMG_SIZE + x) * 3;
                canvas[dst] = img[src];
                canvas[dst + 1] = img[plane + src];
                canvas[dst + 2] = img[2 * plane + src];
            }
        }
    }

    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in metadata {
        enc.add_text_chunk((*k).to_string(), (*v).to_string())
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("metadata chunk: {e}"),
            })?;
    }
    let mut writer = enc.write_header().map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    writer.write_image_data(&canvas).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
