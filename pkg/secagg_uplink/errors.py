"""Errores del protocolo y de los codecs. Todos heredan de ValueError."""


class DimensionError(ValueError):
    """Bit-width o longitud incompatibles entre vectores."""


class FramingError(ValueError):
    """Bytes con tamaño o cabecera incorrectos."""


class CalibrationError(ValueError):
    """No se pueden calibrar qparams (tensor vacío)."""


class CapacityError(ValueError):
    """El bit-width pedido no cabe en el grupo (p > 32)."""


class ShapeError(ValueError):
    """Forma de tensor incompatible con el codec."""


class ProtocolError(ValueError):
    """Mensajes heterogéneos, clientes que faltan o payloads corruptos."""


class ConfigError(ValueError):
    """Fichero de configuración ilegible o inválido."""
