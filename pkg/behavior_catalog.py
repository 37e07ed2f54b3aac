# Behavior and place catalog for the synthetic generator
# Maps human-readable behavior names to the life domain they belong to

BEHAVIORS = {
    "Video": "entertainment",
    "Short video": "entertainment",
    "Music": "entertainment",
    "Gaming": "entertainment",
    "Social media": "social",
    "Messaging": "social",
    "Online shopping": "shopping",
    "News reading": "learning",
    "Weather check": "utility",
    "Navigation": "travel",
    "Public transportation": "travel",
    "Taxi hailing": "travel",
    "Exercise": "health",
    "Cycling": "health",
    "Running": "health",
    "Reading": "learning",
    "Podcast": "entertainment",
    "Food delivery": "shopping",
    "Cooking": "leisure",
    "Alarm": "utility",
    "Calendar": "work",
    "Email": "work",
    "Video meeting": "work",
    "Note taking": "work",
    "Online learning": "learning",
    "Photo taking": "leisure",
    "Photo editing": "leisure",
    "Mobile payment": "shopping",
    "Banking": "finance",
    "Stock trading": "finance",
    "Live streaming": "entertainment",
    "Sports match": "entertainment",
    "Animation": "entertainment",
    "Travel booking": "travel",
    "Hotel booking": "travel",
    "Health tracking": "health",
    "Meditation": "health",
    "Smart home": "utility",
    "Language study": "learning",
    "Audiobook": "learning",
}

# Candidate places per hour bucket (0-5, 6-11, 12-17, 18-23)
LOCATIONS_BY_BUCKET = (
    ("home",),
    ("home", "commute", "workplace", "school"),
    ("workplace", "school", "restaurant", "mall", "gym"),
    ("home", "restaurant", "gym", "mall", "park"),
)

def get_behavior_names(count):
    """Get ``count`` behavior names, padding the catalog with numbered names."""
    names = list(BEHAVIORS.keys())[:count]
    names.extend(f"Behavior {i + 1}" for i in range(len(names), count))
    return names


def get_behavior_domain(name):
    """Get the life domain of a behavior name."""
    return BEHAVIORS.get(name, "other")


def get_locations_for_bucket(bucket):
    """Get the candidate places for an hour bucket."""
    return LOCATIONS_BY_BUCKET[bucket]


def get_supported_behaviors():
    """Get list of catalog behavior names."""
    return list(BEHAVIORS.keys())
