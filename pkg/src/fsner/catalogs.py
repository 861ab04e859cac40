"""Raw dataset labels and the natural-language type names used in prompts."""

FEW_NERD = (
    ('art-broadcastprogram', 'broadcast program'),
    ('art-film', 'film'),
    ('art-music', 'music'),
    ('art-other', 'other art'),
    ('art-painting', 'painting'),
    ('art-writtenart', 'written art'),
    ('person-actor', 'actor'),
    ('person-artist/author', 'artist author'),
    ('person-athlete', 'athlete'),
    ('person-director', 'director'),
    ('person-other', 'other person'),
    ('person-politician', 'politician'),
    ('person-scholar', 'scholar'),
    ('person-soldier', 'soldier'),
    ('product-airplane', 'airplane'),
    ('product-car', 'car'),
    ('product-food', 'food'),
    ('product-game', 'game'),
    ('product-other', 'other product'),
    ('product-ship', 'ship'),
    ('product-software', 'software'),
    ('product-train', 'train'),
    ('product-weapon', 'weapon'),
    ('other-astronomything', 'astronomy thing'),
    ('other-award', 'award'),
    ('other-biologything', 'biology thing'),
    ('other-chemicalthing', 'chemical thing'),
    ('other-currency', 'currency'),
    ('other-disease', 'disease'),
    ('other-educationaldegree', 'educational degree'),
    ('other-god', 'god'),
    ('other-language', 'language'),
    ('other-law', 'law'),
    ('other-livingthing', 'living thing'),
    ('other-medical', 'medical'),
    ('building-airport', 'airport'),
    ('building-hospital', 'hospital'),
    ('building-hotel', 'hotel'),
    ('building-library', 'library'),
    ('building-other', 'other building'),
    ('building-restaurant', 'restaurant'),
    ('building-sportsfacility', 'sports facility'),
    ('building-theater', 'theater'),
    ('event-attack/battle/war/militaryconflict', 'attack battle war military conflict'),
    ('event-disaster', 'disaster'),
    ('event-election', 'election'),
    ('event-other', 'other event'),
    ('event-protest', 'protest'),
    ('event-sportsevent', 'sports event'),
    ('location-bodiesofwater', 'bodies of water'),
    ('location-GPE', 'geographical social political entity'),
    ('location-island', 'island'),
    ('location-mountain', 'mountain'),
    ('location-other', 'other location'),
    ('location-park', 'park'),
    ('location-road/railway/highway/transit', 'road railway highway transit'),
    ('organization-company', 'company'),
    ('organization-education', 'education'),
    ('organization-government/governmentagency', 'government agency'),
    ('organization-media/newspaper', 'media newspaper'),
    ('organization-other', 'other organization'),
    ('organization-politicalparty', 'political party'),
    ('organization-religion', 'religion'),
    ('organization-showorganization', 'show organization'),
    ('organization-sportsleague', 'sports league'),
    ('organization-sportsteam', 'sports team'),
)
CONLL03 = (
    ("PER", "person"),
    ("LOC", "location"),
    ("ORG", "organization"),
    ("MISC", "miscellaneous"),
)

WNUT17 = (
    ("corporation", "corporation"),
    ("creative-work", "creative work"),
    ("group", "group"),
    ("location", "location"),
    ("person", "person"),
    ("product", "product"),
)

GUM = (
    ("abstract", "abstract"),
    ("animal", "animal"),
    ("event", "event"),
    ("object", "object"),
    ("organization", "organization"),
    ("person", "person"),
    ("place", "place"),
    ("plant", "plant"),
    ("quantity", "quantity"),
    ("substance", "substance"),
    ("time", "time"),
)

I2B2_14 = (
    ("AGE", "age"),
    ("BIOID", "biometric ID"),
    ("CITY", "city"),
    ("COUNTRY", "country"),
    ("DATE", "date"),
    ("DEVICE", "device"),
    ("DOCTOR", "doctor"),
    ("EMAIL", "email"),
    ("FAX", "fax"),
    ("HEALTHPLAN", "health plan number"),
    ("HOSPITAL", "hospital"),
    ("IDNUM", "ID number"),
    ("LOCATION_OTHER", "location"),
    ("MEDICALRECORD", "medical record"),
    ("ORGANIZATION", "organization"),
    ("PATIENT", "patient"),
    ("PHONE", "phone number"),
    ("PROFESSION", "profession"),
    ("STATE", "state"),
    ("STREET", "street"),
    ("URL", "url"),
    ("USERNAME", "username"),
    ("ZIP", "zip code"),
)

ONTONOTES = (
    ("CARDINAL", "cardinal"),
    ("DATE", "date"),
    ("EVENT", "event"),
    ("FAC", "fac"),
    ("GPE", "geographical social political entity"),
    ("LANGUAGE", "language"),
    ("LAW", "law"),
    ("LOC", "location"),
    ("MONEY", "money"),
    ("NORP", "nationality religion"),
    ("ORDINAL", "ordinal"),
    ("ORG", "organization"),
    ("PERCENT", "percent"),
    ("PERSON", "person"),
    ("PRODUCT", "product"),
    ("QUANTITY", "quantity"),
    ("TIME", "time"),
    ("WORK_OF_ART", "work of art"),
)

BUILTIN = {
    "fewnerd": FEW_NERD,
    "conll03": CONLL03,
    "wnut17": WNUT17,
    "gum": GUM,
    "i2b2": I2B2_14,
    "ontonotes": ONTONOTES,
}
