//! Builds a tiny IDX image/label file pair on disk, then loads it back
//! with class-pair filtering — the same reader used for MNIST-style
//! datasets supplied by the user.

use byteorder::{BigEndian, WriteBytesExt};
use extraction_game::harness::load_idx;
use std::io::Write as _;

fn main() -> extraction_game::Result<()> {
    let dir = std::path::Path::new("target/examples-out/idx");
    std::fs::create_dir_all(dir)?;
    let img_path = dir.join("images.idx");
    let lbl_path = dir.join("labels.idx");
    let labels: [u8; 5] = [2, 8, 5, 2, 8];
    let (rows, cols) = (4usize, 4usize);

    let mut f = std::fs::File::create(&img_path)?;
    f.write_u32::<BigEndian>(0x0000_0803)?;
    f.write_u32::<BigEndian>(labels.len() as u32)?;
    f.write_u32::<BigEndian>(rows as u32)?;
    f.write_u32::<BigEndian>(cols as u32)?;
    for (i, _) in labels.iter().enumerate() {
        for p in 0..rows * cols {
            f.write_all(&[(i * 37 + p * 11) as u8])?;
        }
    }
    let mut f = std::fs::File::create(&lbl_path)?;
    f.write_u32::<BigEndian>(0x0000_0801)?;
    f.write_u32::<BigEndian>(labels.len() as u32)?;
    f.write_all(&labels)?;

    let full = load_idx(&img_path, &lbl_path, None)?;
    println!(
        "full set: {} records of {}x{}, labels {:?}",
        full.images.rows(),
        full.rows,
        full.cols,
        full.labels
    );
    let pair = load_idx(&img_path, &lbl_path, Some((2, 8)))?;
    println!(
        "filtered to the 2-vs-8 pair: {} records, signed labels {:?}",
        pair.images.rows(),
        pair.labels
    );
    Ok(())
}
