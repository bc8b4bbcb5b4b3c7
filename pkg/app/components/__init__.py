# app/components/__init__.py
# Arquivo vazio - apenas para tornar components um pacote Python
