//! Container layout: a fixed header, a table of segment lengths, then the
//! segments back to back. All integers are little-endian.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PHYD";
pub const VERSION: u8 = 1;

/// Byte lengths of the range-coded segments of one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSegments {
    pub z: Vec<u8>,
    /// `(anchor, non_anchor)` per slice.
    pub slices: Vec<(Vec<u8>, Vec<u8>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub height: u32,
    pub width: u32,
    pub padded_height: u32,
    pub padded_width: u32,
    pub lambda_index: u8,
    pub num_slices: u8,
    pub latent_channels: u16,
    pub views: Vec<ViewSegments>,
}

/// Fixed bytes before the length table.
const FIXED_LEN: usize = 4 + 1 + 2 + 16 + 1 + 1 + 2;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt { offset: self.bytes.len(), reason: format!("truncated {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Bitstream {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn header_len(&self) -> usize {
        FIXED_LEN + self.views.len() * (4 + 8 * self.num_slices as usize)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let k = u16::try_from(self.views.len())
            .map_err(|_| Error::Input(format!("{} views do not fit the header", self.views.len())))?;
        let mut out = Vec::with_capacity(self.header_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&k.to_le_bytes());
        for v in [self.height, self.width, self.padded_height, self.padded_width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.lambda_index);
        out.push(self.num_slices);
        out.extend_from_slice(&self.latent_channels.to_le_bytes());
        let len32 = |s: &[u8]| -> Result<[u8; 4]> {
            u32::try_from(s.len()).map(u32::to_le_bytes).map_err(|_| Error::Input("segment longer than 4 GiB".into()))
        };
        for view in &self.views {
            if view.slices.len() != self.num_slices as usize {
                return Err(Error::Contract(format!(
                    "view has {} slices, header declares {}",
                    view.slices.len(),
                    self.num_slices
                )));
            }
            out.extend_from_slice(&len32(&view.z)?);
            for (a, n) in &view.slices {
                out.extend_from_slice(&len32(a)?);
                out.extend_from_slice(&len32(n)?);
            }
        }
        for view in &self.views {
            out.extend_from_slice(&view.z);
            for (a, n) in &view.slices {
                out.extend_from_slice(a);
                out.extend_from_slice(n);
            }
        }
        Ok(out)
    }

    /// Parses a complete container; the declared lengths must account for
    /// every byte.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a PHYD bitstream".into()));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let k = r.u16("view count")? as usize;
        let height = r.u32("height")?;
        let width = r.u32("width")?;
        let padded_height = r.u32("padded height")?;
        let padded_width = r.u32("padded width")?;
        let lambda_index = r.u8("lambda index")?;
        let num_slices = r.u8("slice count")?;
        let latent_channels = r.u16("channel count")?;
        if k == 0 || num_slices == 0 {
            return Err(Error::Corrupt { offset: 5, reason: "empty view or slice count".into() });
        }
        let mut lens = Vec::with_capacity(k);
        for _ in 0..k {
            let z = r.u32("segment table")? as usize;
            let mut s = Vec::with_capacity(num_slices as usize);
            for _ in 0..num_slices {
                s.push((r.u32("segment table")? as usize, r.u32("segment table")? as usize));
            }
            lens.push((z, s));
        }
        let mut views = Vec::with_capacity(k);
        for (z, s) in lens {
            let z = r.take(z, "segment")?.to_vec();
            let mut slices = Vec::with_capacity(s.len());
            for (a, n) in s {
                slices.push((r.take(a, "segment")?.to_vec(), r.take(n, "segment")?.to_vec()));
            }
            views.push(ViewSegments { z, slices });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt { offset: r.pos, reason: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Bitstream { height, width, padded_height, padded_width, lambda_index, num_slices, latent_channels, views })
    }
}
