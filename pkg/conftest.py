"""Configure Django for pytest collection, as manage.py does for `manage.py test`."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'CENetProject.settings')
django.setup()
