//! Registered memory: fixed-size byte regions that backends read from and
//! write into directly.

use std::cell::UnsafeCell;
use std::fmt;
use std::sync::Arc;

struct Bytes {
    data: Box<[UnsafeCell<u8>]>,
}

// SAFETY: the engine only writes a destination range while moving a slice
// into it. Overlapping writes come from re-executions of the same slice,
// which store identical bytes; applications read a range only after the batch
// that writes it has completed.
unsafe impl Sync for Bytes {}
unsafe impl Send for Bytes {}

/// A cheaply clonable handle to a byte region. A virtual region has a length
/// but no storage; copies into or out of it are skipped, which lets
/// benchmarks move terabytes without touching memory.
#[derive(Clone)]
pub struct MemoryRegion {
    bytes: Option<Arc<Bytes>>,
    len: usize,
}

impl fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("len", &self.len)
            .field("virtual", &self.bytes.is_none())
            .finish()
    }
}

impl MemoryRegion {
    pub fn zeroed(len: usize) -> Self {
        let data: Box<[u8]> = vec![0u8; len].into_boxed_slice();
        Self::from_boxed(data)
    }

    pub fn from_vec(v: Vec<u8>) -> Self {
        Self::from_boxed(v.into_boxed_slice())
    }

    fn from_boxed(data: Box<[u8]>) -> Self {
        let len = data.len();
        // SAFETY: UnsafeCell<u8> has the same layout as u8.
        let data = unsafe { Box::from_raw(Box::into_raw(data) as *mut [UnsafeCell<u8>]) };
        MemoryRegion {
            bytes: Some(Arc::new(Bytes { data })),
            len,
        }
    }

    pub fn virtual_region(len: usize) -> Self {
        MemoryRegion { bytes: None, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_virtual(&self) -> bool {
        self.bytes.is_none()
    }

    fn ptr(&self) -> Option<*mut u8> {
        self.bytes.as_ref().map(|b| UnsafeCell::raw_get(b.data.as_ptr()))
    }

    fn check(&self, offset: usize, len: usize) {
        assert!(
            offset.checked_add(len).is_some_and(|end| end <= self.len),
            "range {offset}+{len} outside region of {} bytes",
            self.len
        );
    }

    pub fn write(&self, offset: usize, src: &[u8]) {
        self.check(offset, src.len());
        if let Some(p) = self.ptr() {
            // SAFETY: bounds checked above; see the Sync note on `Bytes`.
            unsafe { std::ptr::copy(src.as_ptr(), p.add(offset), src.len()) }
        }
    }

    pub fn read(&self, offset: usize, dst: &mut [u8]) {
        self.check(offset, dst.len());
        match self.ptr() {
            // SAFETY: bounds checked above.
            Some(p) => unsafe { std::ptr::copy(p.add(offset), dst.as_mut_ptr(), dst.len()) },
            None => dst.fill(0),
        }
    }

    pub fn to_vec(&self, offset: usize, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.read(offset, &mut v);
        v
    }

    pub fn fill(&self, offset: usize, len: usize, byte: u8) {
        self.check(offset, len);
        if let Some(p) = self.ptr() {
            // SAFETY: bounds checked above.
            unsafe { std::ptr::write_bytes(p.add(offset), byte, len) }
        }
    }

    /// Runs `f` over a borrowed view of the range. The view must not be held
    /// while the engine may be writing the same bytes.
    pub fn with_slice<R>(&self, offset: usize, len: usize, f: impl FnOnce(&[u8]) -> R) -> Option<R> {
        self.check(offset, len);
        let p = self.ptr()?;
        // SAFETY: bounds checked; caller contract on concurrent writers.
        Some(f(unsafe { std::slice::from_raw_parts(p.add(offset), len) }))
    }

    /// Copies `len` bytes between regions. Either side being virtual makes
    /// this a no-op.
    pub fn copy(src: &MemoryRegion, src_off: usize, dst: &MemoryRegion, dst_off: usize, len: usize) {
        src.check(src_off, len);
        dst.check(dst_off, len);
        if let (Some(s), Some(d)) = (src.ptr(), dst.ptr()) {
            // SAFETY: both ranges bounds checked; `copy` tolerates overlap.
            unsafe { std::ptr::copy(s.add(src_off), d.add(dst_off), len) }
        }
    }
}
