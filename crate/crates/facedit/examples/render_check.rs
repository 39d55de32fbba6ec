// quick visual check
use facedit::synthfaces::*;
fn main() {
    let mut big = ndarray::Array3::<f64>::zeros((3, 32*2, 32*4));
    let combos = [
        (1u64, AttributeVector{hair_color:HairColor::Black, glasses:false, expression:Expression::Smiling, age_band:AgeBand::Young, beard:false, chubby:false, gender_style:GenderStyle::A}),
        (1, AttributeVector{hair_color:HairColor::Blonde, glasses:true, expression:Expression::Sad, age_band:AgeBand::Young, beard:false, chubby:false, gender_style:GenderStyle::B}),
        (2, AttributeVector{hair_color:HairColor::Pink, glasses:false, expression:Expression::Neutral, age_band:AgeBand::Old, beard:true, chubby:false, gender_style:GenderStyle::A}),
        (2, AttributeVector{hair_color:HairColor::Blue, glasses:true, expression:Expression::Smiling, age_band:AgeBand::Old, beard:false, chubby:true, gender_style:GenderStyle::B}),
        (3, AttributeVector{hair_color:HairColor::Black, glasses:false, expression:Expression::Sad, age_band:AgeBand::Young, beard:true, chubby:true, gender_style:GenderStyle::A}),
        (7, AttributeVector{hair_color:HairColor::Blonde, glasses:false, expression:Expression::Smiling, age_band:AgeBand::Old, beard:false, chubby:false, gender_style:GenderStyle::B}),
        (8, AttributeVector{hair_color:HairColor::Pink, glasses:true, expression:Expression::Neutral, age_band:AgeBand::Young, beard:false, chubby:true, gender_style:GenderStyle::B}),
        (9, AttributeVector{hair_color:HairColor::Blue, glasses:false, expression:Expression::Sad, age_band:AgeBand::Old, beard:true, chubby:false, gender_style:GenderStyle::A}),
    ];
    for (i, (seed, attrs)) in combos.iter().enumerate() {
        let id = sample_identity(*seed);
        let img = render(&id, attrs);
        let (r0, c0) = ((i / 4) * 32, (i % 4) * 32);
        for ch in 0..3 { for r in 0..32 { for c in 0..32 {
            big[[ch, r0 + r, c0 + c]] = img[[ch, r, c]];
        }}}
    }
    save_png(std::path::Path::new("/tmp/faces.png"), &big).unwrap();
    println!("saved");
}
