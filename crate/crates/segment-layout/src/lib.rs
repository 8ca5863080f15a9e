//! Where things live inside a segment.
//!
//! A segment is one zone per drive. Each zone is split into a header
//! region (one chunk), a data region of `S` chunk slots and a footer region
//! holding the 20-byte metadata of every data-region block. Stripes in the
//! data region are organised in groups of `G` consecutive stripes.

mod cst;
mod footer;
mod geometry;
mod header;
mod meta;
mod rotation;

pub use cst::{cst_entry_bytes, cst_max_bits, cst_max_bytes, CompactStripeTable, CstScan};
pub use footer::{parse_footer, serialize_footer, FOOTER_MAGIC};
pub use geometry::{compute_geometry, GroupBounds, SegmentGeometry};
pub use header::{
    parse_header, serialize_header, SegmentClass, SegmentDescriptor, SegmentState, WriteMode, HEADER_MAGIC,
};
pub use meta::{
    is_mapping_lba, mapping_group_of, mapping_lba, BlockKind, BlockMeta, Oob, ENTRIES_PER_BLOCK, INVALID_LBA,
    MAPPING_GROUP_ENTRIES, META_ENTRY_BYTES,
};
pub use rotation::{drive_of_position, parity_drives, position_of_drive};

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("zone of {capacity} blocks cannot hold a segment with {chunk}-block chunks")]
    ZoneTooSmall { capacity: u32, chunk: u32 },
    #[error("offset {0} is outside the data region")]
    OffsetOutsideDataRegion(u32),
    #[error("segment does not use zone append")]
    NotAnAppendSegment,
    #[error("stripe id {id} does not fit group size {group_size}")]
    StripeIdOutOfRange { id: u32, group_size: u32 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("corrupt footer: {0}")]
    CorruptFooter(String),
    #[error("corrupt out-of-band metadata")]
    CorruptOob,
}
