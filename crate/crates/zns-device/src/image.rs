//! Flat-file persistence of the durable device state.
//!
//! `<name>.img` holds every zone back to back, each block as 4096 payload
//! bytes followed by 64 OOB bytes, unwritten blocks zero-filled.
//! `<name>.json` holds geometry and per-zone state. Saving captures the
//! durable state only, so a saved image is exactly what a crash would leave.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::device::Zone;
use crate::{
    zeroed_page, DeviceArray, DeviceError, DeviceGeometry, StoredBlock, ZnsDevice, ZoneState, BLOCK_SIZE, OOB_SIZE,
};

#[derive(Serialize, Deserialize)]
struct ZoneRecord {
    state: ZoneState,
    write_pointer: u32,
    finished: bool,
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    geometry: DeviceGeometry,
    failed: bool,
    zones: Vec<ZoneRecord>,
}

fn io_err(e: impl std::fmt::Display) -> DeviceError {
    DeviceError::Image(e.to_string())
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl ZnsDevice {
    pub fn save_image(&self, path: &Path) -> Result<(), DeviceError> {
        let img = self.crash_image();
        let geometry = img.geometry().clone();
        let cap = geometry.zone_capacity_blocks;
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        let zero_oob = [0u8; OOB_SIZE];
        for z in img.zones_raw() {
            for off in 0..cap as usize {
                match z.durable.get(off).and_then(|b| b.as_ref()) {
                    Some(b) => {
                        out.write_all(b.bytes()).map_err(io_err)?;
                        out.write_all(&b.oob).map_err(io_err)?;
                    }
                    None => {
                        out.write_all(&crate::ZERO_PAGE).map_err(io_err)?;
                        out.write_all(&zero_oob).map_err(io_err)?;
                    }
                }
            }
        }
        out.flush().map_err(io_err)?;
        let meta = ImageMeta {
            geometry,
            failed: img.is_failed(),
            zones: img
                .zones_raw()
                .iter()
                .map(|z| ZoneRecord {
                    state: z.state,
                    write_pointer: z.write_pointer,
                    finished: z.finished,
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(io_err)?;
        std::fs::write(sidecar(path), json).map_err(io_err)
    }

    pub fn load_image(path: &Path) -> Result<ZnsDevice, DeviceError> {
        let meta: ImageMeta = serde_json::from_slice(&std::fs::read(sidecar(path)).map_err(io_err)?).map_err(io_err)?;
        meta.geometry.validate()?;
        if meta.zones.len() != meta.geometry.num_zones as usize {
            return Err(io_err("zone count does not match geometry"));
        }
        let cap = meta.geometry.zone_capacity_blocks;
        let mut input = BufReader::new(File::open(path).map_err(io_err)?);
        let mut zones = Vec::with_capacity(meta.zones.len());
        for rec in &meta.zones {
            let mut durable = Vec::with_capacity(rec.write_pointer as usize);
            for off in 0..cap {
                let mut page = zeroed_page();
                let mut oob = [0u8; OOB_SIZE];
                input.read_exact(&mut page[..]).map_err(io_err)?;
                input.read_exact(&mut oob).map_err(io_err)?;
                if off < rec.write_pointer {
                    let b = StoredBlock::new(Some(page), oob).compact();
                    durable.push(if b.is_hole() { None } else { Some(b) });
                }
            }
            zones.push(Zone {
                state: rec.state,
                write_pointer: rec.write_pointer,
                durable,
                finished: rec.finished,
                ..Zone::default()
            });
        }
        debug_assert_eq!(BLOCK_SIZE, 4096);
        Ok(ZnsDevice::from_parts(meta.geometry, zones, meta.failed))
    }
}

impl DeviceArray {
    /// Writes `drive-<i>.img` (+ `.json`) per drive into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), DeviceError> {
        std::fs::create_dir_all(dir).map_err(io_err)?;
        for (i, d) in self.drives().iter().enumerate() {
            d.save_image(&dir.join(format!("drive-{i}.img")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<DeviceArray, DeviceError> {
        let mut drives = Vec::new();
        loop {
            let p = dir.join(format!("drive-{}.img", drives.len()));
            if !p.exists() {
                break;
            }
            drives.push(ZnsDevice::load_image(&p)?);
        }
        if drives.is_empty() {
            return Err(io_err(format!("no drive images in {}", dir.display())));
        }
        Ok(DeviceArray::from_drives(drives))
    }
}
