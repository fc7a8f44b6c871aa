use koszul::bimodule::*;
use koszul::modular::*;
use std::time::Instant;

fn main() {
    // cross-validate providers against realize on overlap
    let w = Window::modular(5, 1);
    let t0 = Instant::now();
    let small = builtin_com(&w).unwrap();
    let large = builtin_com_large(&Window::modular(5, 1)).unwrap();
    for (&k, cell) in &small.cells {
        assert_eq!(cell.space.dim(), large.dim(k.0, k.1), "com cell {k:?}");
    }
    for (&k, cell) in &large.cells {
        assert_eq!(cell.space.dim(), small.dim(k.0, k.1), "com cell {k:?} (rev)");
    }
    println!("com provider matches realize on (5,1): {:?}", t0.elapsed());

    let t1 = Instant::now();
    let bs = builtin_bipartite(&Window::modular(4, 0)).unwrap();
    let bl = builtin_bipartite_large(&Window::modular(4, 0)).unwrap();
    for (&k, cell) in &bs.cells {
        assert_eq!(cell.space.dim(), bl.dim(k.0, k.1), "bip cell {k:?}");
    }
    println!("bipartite provider matches realize on (4,0): {:?}", t1.elapsed());

    // bar complexes over the providers: timing at a mid window
    let t2 = Instant::now();
    let m = builtin_com_large(&Window::modular(8, 3)).unwrap();
    let bar = modular_bar_complex(&m, &Window::modular(0, 3)).unwrap();
    let mut dims = Vec::new();
    for (k, sp) in &bar.spaces {
        dims.push((k.0, k.1, sp.dim()));
    }
    println!("bar(com) at (0,3): {:?} dims {dims:?}", t2.elapsed());
    let t3 = Instant::now();
    for (k, sp) in &bar.spaces {
        assert!(sp.diff.mul(&sp.diff).is_zero(), "d² at {k:?}");
    }
    println!("d² check: {:?}", t3.elapsed());
    let h = bar.homology_dims(0, 3).unwrap();
    println!("H(bar com)(0,3): {h:?}");
}
