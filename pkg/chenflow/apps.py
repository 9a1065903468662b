from django.apps import AppConfig


class ChenflowConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "chenflow"
    verbose_name = "Flujo de Chen y flujos de cuarto orden"
