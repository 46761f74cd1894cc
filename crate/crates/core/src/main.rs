use pneumoseg::bench::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() {
    std::process::exit(pneumoseg::cli::run(std::env::args_os()));
}
