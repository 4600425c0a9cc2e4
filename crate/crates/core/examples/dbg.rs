use diffplan::{datagen::*, tasks::*};
fn main() {
    let s = register_default_suite(50);
    for n in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let ds = generate_dataset(&s, 100, n, 3).unwrap();
        println!("{n} {:?}", ds.stats().iter().map(|(k,v)| format!("{k}:{:.2}/{:.1}", v.success_rate, v.mean_return)).collect::<Vec<_>>());
    }
}
