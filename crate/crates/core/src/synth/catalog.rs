//! Fixed symbolic vocabulary of the synthetic behaviour logs: event
//! categories per modality, behaviour archetypes and their category focus,
//! and the built-in downstream scenarios.

use crate::hier::Modality;

pub const BILL: &[&str] = &[
    "dining", "grocery", "travel", "utilities", "entertainment", "shopping", "transfer",
    "loan_repay", "insurance", "education", "medical", "telecom",
];
pub const MINI: &[&str] = &[
    "mp_food_delivery", "mp_ride_hailing", "mp_ticketing", "mp_health", "mp_games",
    "mp_credit", "mp_coupons", "mp_bike", "mp_charity", "mp_parking",
];
pub const SPM: &[&str] = &[
    "spm_home", "spm_wealth", "spm_coupon", "spm_credit", "spm_bill_detail", "spm_search",
    "spm_transfer", "spm_insurance", "spm_forest", "spm_map",
];
pub const APP: &[&str] = &[
    "app_map", "app_games", "app_video", "app_shopping", "app_finance", "app_food",
    "app_travel", "app_social", "app_loan", "app_health",
];
pub const SEARCH: &[&str] = &[
    "restaurant", "noodles", "coffee", "flight", "hotel", "loan", "credit", "movie", "phone",
    "fund", "metro", "hospital",
];

/// Categories that only ever appear as scenario trigger events.
pub const TARGETS: &[(&str, Modality)] = &[
    ("spm_member_signin", Modality::Spm),
    ("bill_overdue", Modality::Bill),
    ("mp_dining_voucher", Modality::Mini),
    ("mp_travel_package", Modality::Mini),
];

pub const AMOUNTS: &[&str] = &["amt_low", "amt_mid", "amt_high"];
pub const ACTION_OPEN: &str = "open";
pub const ACTION_VISIT: &str = "visit";
pub const ACTION_INSTALLED: &str = "installed";
pub const NOISE_TOKENS: usize = 20;

pub fn noise_token(i: usize) -> String {
    format!("noise_{i}")
}

/// Number of numeric tabular features.
pub const TABULAR_FEATURES: usize = 8;

pub fn categories(m: Modality) -> &'static [&'static str] {
    match m {
        Modality::Bill => BILL,
        Modality::Mini => MINI,
        Modality::Spm => SPM,
        Modality::App => APP,
        Modality::Search => SEARCH,
        Modality::Tabular => &[],
    }
}

/// Behaviour archetypes; a persona is a mixture over these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Archetype {
    Dining,
    Navigation,
    Risk,
    Shopper,
    Wealth,
    Entertainment,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::Dining,
        Archetype::Navigation,
        Archetype::Risk,
        Archetype::Shopper,
        Archetype::Wealth,
        Archetype::Entertainment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Dining => "dining",
            Archetype::Navigation => "navigation",
            Archetype::Risk => "risk",
            Archetype::Shopper => "shopper",
            Archetype::Wealth => "wealth",
            Archetype::Entertainment => "entertainment",
        }
    }

    /// Focus categories of this archetype in modality `m`; empty means the
    /// archetype behaves like the uniform baseline there. The dining
    /// archetype is deliberately confined to Bill.
    pub fn focus(self, m: Modality) -> &'static [&'static str] {
        use Archetype::*;
        use Modality::*;
        match (self, m) {
            (Dining, Bill) => &["dining"],
            (Dining, _) => &[],
            (Navigation, Bill) => &["travel"],
            (Navigation, Mini) => &["mp_ride_hailing", "mp_bike", "mp_parking"],
            (Navigation, Spm) => &["spm_map", "spm_forest"],
            (Navigation, App) => &["app_map", "app_travel"],
            (Navigation, Search) => &["flight", "hotel", "metro"],
            (Risk, Bill) => &["loan_repay", "transfer"],
            (Risk, Mini) => &["mp_credit"],
            (Risk, Spm) => &["spm_credit"],
            (Risk, App) => &["app_loan"],
            (Risk, Search) => &["loan", "credit"],
            (Shopper, Bill) => &["shopping", "grocery"],
            (Shopper, Mini) => &["mp_coupons"],
            (Shopper, Spm) => &["spm_coupon"],
            (Shopper, App) => &["app_shopping"],
            (Shopper, Search) => &["phone"],
            (Wealth, Bill) => &["insurance", "education"],
            (Wealth, Mini) => &["mp_health", "mp_charity"],
            (Wealth, Spm) => &["spm_wealth", "spm_insurance"],
            (Wealth, App) => &["app_finance"],
            (Wealth, Search) => &["fund"],
            (Entertainment, Bill) => &["entertainment", "telecom"],
            (Entertainment, Mini) => &["mp_games", "mp_ticketing"],
            (Entertainment, Spm) => &["spm_home"],
            (Entertainment, App) => &["app_games", "app_video", "app_social"],
            (Entertainment, Search) => &["movie"],
            (_, Tabular) => &[],
        }
    }
}

/// Share of an archetype's events that land on its focus categories.
pub const FOCUS_STRENGTH: f64 = 0.85;

/// Words used by query and answer templates.
pub const TEMPLATE_WORDS: &[&str] = &[
    "what", "are", "the", "user's", "most", "likely", "actions", "in", "next", "period", "will",
    "user", "sign", "for", "member", "rewards", "soon", "is", "to", "miss", "a", "repayment",
    "redeem", "voucher", "book", "package", "how", "does", "engage", "with", "and", "frequently",
    "sometimes", "rarely", "uses", "also", "shows", "no", "activity", "this", "topic", "notable",
    "of", "on", "recent", "history", "interest", "habits", "over", "past", "days", "weeks",
];

pub const PUNCTUATION: &[&str] = &["?", ".", ",", ":"];

/// Every content token an event payload may carry, in a fixed order.
pub fn event_words() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for list in [BILL, MINI, SPM, APP, SEARCH] {
        out.extend(list.iter().map(|s| s.to_string()));
    }
    out.extend(TARGETS.iter().map(|(s, _)| s.to_string()));
    out.extend(AMOUNTS.iter().map(|s| s.to_string()));
    out.extend([ACTION_OPEN, ACTION_VISIT, ACTION_INSTALLED].map(String::from));
    out.extend((0..NOISE_TOKENS).map(noise_token));
    out
}

/// Category tokens (the "content" of events, excluding attributes and noise).
pub fn category_words() -> Vec<&'static str> {
    let mut out = Vec::new();
    for list in [BILL, MINI, SPM, APP, SEARCH] {
        out.extend_from_slice(list);
    }
    out.extend(TARGETS.iter().map(|(s, _)| *s));
    out
}

pub fn modality_of_category(cat: &str) -> Option<Modality> {
    for m in Modality::EVENT_MODALITIES {
        if categories(m).contains(&cat) {
            return Some(m);
        }
    }
    TARGETS.iter().find(|(s, _)| *s == cat).map(|(_, m)| *m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focus_categories_exist() {
        for a in Archetype::ALL {
            for m in Modality::EVENT_MODALITIES {
                for c in a.focus(m) {
                    assert!(categories(m).contains(c), "{c} not a {m:?} category");
                }
            }
        }
    }

    #[test]
    fn dining_only_in_bill() {
        for m in Modality::EVENT_MODALITIES {
            assert_eq!(Archetype::Dining.focus(m).is_empty(), m != Modality::Bill);
        }
    }
}
