use fluxlab::accept::AcceptanceSuite;

fn main() {
    let suite = AcceptanceSuite::default();
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    for i in args {
        let o = suite.run(i);
        println!("{}", o.line());
    }
}
