use spincorr_bench::{orientations, random_posts};

#[test]
fn fixtures_are_seeded() {
    let (l, r) = random_posts(3, 2, 5);
    assert_eq!(l.ids(), ["l0", "l1", "l2"]);
    assert_eq!(r.ids(), ["r0", "r1"]);
    assert_eq!(orientations(&l), orientations(&random_posts(3, 2, 5).0));
    assert_ne!(orientations(&l), orientations(&random_posts(3, 2, 6).0));
}
