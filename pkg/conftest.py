import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'sdgdlab.settings')
django.setup()
