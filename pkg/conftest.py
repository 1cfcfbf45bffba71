import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "darknightlab.settings")
django.setup()
