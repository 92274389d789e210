//! Seeded header mutations shared by the fuzz test and the acceptance suite.

use std::io::Write;
use std::panic::catch_unwind;

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scnfusion::nifti::{affine, parse_nifti, write_nifti, NiftiHeader, VolumeGrid};
use scnfusion::Error;

pub const CASES: usize = 1000;

// (offset, width) of the fields the parser interprets.
const FIELDS: &[(usize, usize)] = &[
    (0, 4),   // sizeof_hdr
    (40, 2),  // dim[0]
    (42, 2),  // dim[1]
    (44, 2),  // dim[2]
    (46, 2),  // dim[3]
    (48, 2),  // dim[4]
    (70, 2),  // datatype
    (72, 2),  // bitpix
    (76, 4),  // pixdim[0] / qfac
    (80, 4),  // pixdim[1]
    (108, 4), // vox_offset
    (112, 4), // scl_slope
    (116, 4), // scl_inter
    (252, 2), // qform_code
    (254, 2), // sform_code
    (256, 4), // quatern_b
    (280, 4), // srow_x[0]
    (296, 4), // srow_y[0]
    (312, 4), // srow_z[0]
    (344, 4), // magic
];

pub fn seed_file() -> Vec<u8> {
    let shape = [6, 5, 4];
    let data: Vec<f64> = (0..120).map(|i| i as f64 * 0.5 - 3.0).collect();
    let vol = VolumeGrid::new(shape, data, affine::diagonal(2.0, 2.0, 2.0)).unwrap();
    write_nifti(&NiftiHeader::for_grid(shape, vol.affine), &vol, false).unwrap()
}

fn mutate(base: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = base.to_vec();
    match rng.random_range(0..6) {
        0 => {
            for _ in 0..rng.random_range(1..9) {
                let at = rng.random_range(0..352);
                b[at] = rng.random();
            }
        }
        1 => {
            let (off, w) = FIELDS[rng.random_range(0..FIELDS.len())];
            for byte in &mut b[off..off + w] {
                *byte = rng.random();
            }
        }
        2 => {
            let (off, w) = FIELDS[rng.random_range(0..FIELDS.len())];
            let extreme: [u8; 4] = match rng.random_range(0..6) {
                0 => [0xff; 4],
                1 => [0; 4],
                2 => 0x7fff_ffffu32.to_le_bytes(),
                3 => f32::NAN.to_le_bytes(),
                4 => f32::INFINITY.to_le_bytes(),
                _ => (-1.0e30f32).to_le_bytes(),
            };
            b[off..off + w].copy_from_slice(&extreme[..w]);
        }
        3 => b.truncate(rng.random_range(0..b.len())),
        4 => {
            // Big-endian header claims with a little-endian body.
            b[0..4].copy_from_slice(&348i32.to_be_bytes());
            let (off, w) = FIELDS[rng.random_range(1..FIELDS.len())];
            b[off..off + w].reverse();
        }
        _ => {
            let at = rng.random_range(0..352);
            b[at] ^= 1 << rng.random_range(0..8);
            let mut gz = GzEncoder::new(Vec::new(), Compression::fast());
            gz.write_all(&b).unwrap();
            let mut z = gz.finish().unwrap();
            if rng.random_bool(0.3) {
                let cut = rng.random_range(10..z.len());
                z.truncate(cut);
            }
            return z;
        }
    }
    b
}

pub struct FuzzTally {
    pub accepted: usize,
    pub rejected: usize,
    /// Cases that panicked, returned an untyped error or an invalid volume.
    pub failures: Vec<String>,
}

pub fn run(cases: usize, seed: u64) -> FuzzTally {
    let base = seed_file();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = FuzzTally {
        accepted: 0,
        rejected: 0,
        failures: Vec::new(),
    };
    for case in 0..cases {
        let input = mutate(&base, &mut rng);
        match catch_unwind(|| parse_nifti(&input)) {
            Err(_) => tally.failures.push(format!("case {case}: panic")),
            Ok(Ok((header, vol))) => {
                tally.accepted += 1;
                if vol.data.len() != header.dims.iter().product::<usize>()
                    || !vol.data.iter().all(|v| v.is_finite())
                {
                    tally
                        .failures
                        .push(format!("case {case}: inconsistent volume"));
                }
            }
            Ok(Err(e)) => {
                tally.rejected += 1;
                if !matches!(e, Error::Nifti(_)) || e.to_string().is_empty() {
                    tally
                        .failures
                        .push(format!("case {case}: unclassified error {e}"));
                }
            }
        }
    }
    tally
}
