/// Receives one tick per floating-point operation executed by a layer kernel.
///
/// Kernels are generic over the meter so that [`NoMeter`] compiles away and
/// [`FlopCounter`] counts what actually ran. A multiply-accumulate is one tick.
pub trait Meter {
    fn tick(&mut self, n: u64);
}

/// Discards all ticks.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoMeter;

impl Meter for NoMeter {
    #[inline(always)]
    fn tick(&mut self, _n: u64) {}
}

/// Counts executed operations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounter {
    pub count: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Meter for FlopCounter {
    #[inline(always)]
    fn tick(&mut self, n: u64) {
        self.count += n;
    }
}
